use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use dfmnet_core::bench::{measure_latency_ms, measure_throughput, size_report, ThroughputCfg};
use dfmnet_core::dfmw;
use dfmnet_core::dqfm::{alpha_vectors, VbaVariant};
use dfmnet_core::model::{
    from_named_tensors, stack_samples, DfmNet, Gating, InputMode, ModelConfig,
};
use dfmnet_core::nn::ParamStore;
use dfmnet_core::quality::{audit_set, QualityPair, QualityReport};
use dfmnet_core::tensor::Ctx;
use dfmnet_core::train::{Hyper, Trainer};
use dfmnet_core::Tensor;

use crate::args::{merge, required, BenchArgs, Config, EvalArgs, GateFlags, InferArgs, QualityArgs, TrainArgs};
use crate::dataset::DatasetManifest;
use crate::error::{CliError, Result};
use crate::imgio;

fn gate_config(gates: &GateFlags, cfg: &Config, mode: InputMode) -> Result<ModelConfig> {
    let vba = merge(gates.vba_variant.clone(), cfg.string("vba-variant"))
        .map(|s| VbaVariant::from_str(&s))
        .transpose()?
        .unwrap_or_default();
    let gating = merge(gates.gating.clone(), cfg.string("gating"))
        .map(|s| Gating::from_str(&s))
        .transpose()?
        .unwrap_or_default();
    let recalib = merge(gates.recalib_count, cfg.usize("recalib-count")).unwrap_or(2);
    if recalib > 3 {
        return Err(CliError::Usage(format!("--recalib-count {recalib} outside 0..=3")));
    }
    Ok(ModelConfig {
        mode,
        dqw: !(gates.no_dqw || cfg.bool("no-dqw").unwrap_or(false)),
        dha: !(gates.no_dha || cfg.bool("no-dha").unwrap_or(false)),
        recalib_count: recalib,
        vba_variant: vba,
        gating,
    })
}

fn parse_mode(flag: Option<String>, cfg: &Config) -> Result<Option<InputMode>> {
    merge(flag, cfg.string("mode"))
        .map(|s| InputMode::from_str(&s).map_err(CliError::from))
        .transpose()
}

fn write_csv(path: &Path, header: &str, rows: &[String]) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    writeln!(f, "{header}")?;
    for row in rows {
        writeln!(f, "{row}")?;
    }
    Ok(())
}

// ---- train ----------------------------------------------------------------

pub fn train(args: TrainArgs) -> Result<()> {
    let cfg = Config::load(args.config.as_ref())?;
    let data_dir = required(merge(args.data, cfg.path("data")), "data")?;
    let out = required(merge(args.out, cfg.path("out")), "out")?;
    let mode = parse_mode(args.mode, &cfg)?.unwrap_or(InputMode::Rgbd);
    let model_cfg = gate_config(&args.gates, &cfg, mode)?;

    let manifest = DatasetManifest::scan(&data_dir, mode, true)?;
    let samples = manifest.load_samples()?;
    println!("loaded {} samples from {}", samples.len(), data_dir.display());

    let hyper = Hyper {
        lr: merge(args.lr, cfg.f32("lr")).unwrap_or(1e-4),
        batch_size: merge(args.batch_size, cfg.usize("batch-size")).unwrap_or(10),
        epochs: merge(args.epochs, cfg.usize("epochs")).unwrap_or(300),
        seed: merge(args.seed, cfg.u64("seed")).unwrap_or(0),
        augment: !(args.no_augment || cfg.bool("no-augment").unwrap_or(false)),
        ..Hyper::default()
    };
    let steps_cap = merge(args.steps, cfg.usize("steps"));

    let (model, store) = DfmNet::init(model_cfg, hyper.seed)?;
    println!("initialized fresh weights (seed {})", hyper.seed);
    let mut tr = Trainer::new(model, store, samples, hyper)?;
    let total = steps_cap.unwrap_or(tr.total_steps()).min(tr.total_steps());
    for step in 1..=total {
        let loss = tr.train_step()?;
        if step % 10 == 0 || step == 1 || step == total {
            println!("step {step}/{total}  loss {loss:.4}");
        }
    }
    let (_, store) = tr.into_parts();
    dfmw::save_store(&out, &store)?;
    println!("wrote {}", out.display());
    Ok(())
}

// ---- infer ----------------------------------------------------------------

fn load_model(weights: &Path, gates: &GateFlags, cfg: &Config, mode_flag: Option<InputMode>) -> Result<(DfmNet, ParamStore)> {
    let tensors = dfmw::load(weights)?;
    let derived = dfmnet_core::model::derive_structure(&tensors)?;
    if let Some(mode) = mode_flag {
        if mode != derived.mode {
            return Err(CliError::Core(dfmnet_core::Error::ModeMismatch(format!(
                "weights are for {:?} input, --mode requested {:?}",
                derived.mode, mode
            ))));
        }
    }
    let mut model_cfg = gate_config(gates, cfg, derived.mode)?;
    // flags that were not explicitly given follow the file structure
    if !gates.no_dqw && cfg.bool("no-dqw").is_none() {
        model_cfg.dqw = derived.dqw;
    }
    if !gates.no_dha && cfg.bool("no-dha").is_none() {
        model_cfg.dha = derived.dha;
    }
    if gates.recalib_count.is_none() && cfg.usize("recalib-count").is_none() {
        model_cfg.recalib_count = derived.recalib_count;
    }
    let (model, store) = from_named_tensors(model_cfg, tensors)?;
    Ok((model, store))
}

fn infer_one(model: &DfmNet, store: &ParamStore, rgb: &Tensor, aux: &Tensor) -> Result<(Tensor, Option<f32>)> {
    let mut ctx = Ctx::infer();
    let rgb = stack_samples(&[rgb])?;
    let aux = stack_samples(&[aux])?;
    let out = model.forward(&mut ctx, store, &rgb, &aux)?;
    let alpha_bar = out.alpha_vectors().map(|v| v[0].alpha_bar);
    Ok((out.s_c, alpha_bar))
}

pub fn infer(args: InferArgs) -> Result<()> {
    let cfg = Config::load(args.config.as_ref())?;
    let weights = required(merge(args.weights, cfg.path("weights")), "weights")?;
    let mode_flag = parse_mode(args.mode, &cfg)?;
    let (model, store) = load_model(&weights, &args.gates, &cfg, mode_flag)?;
    let flow_mode = model.cfg.mode == InputMode::Flow3;

    let data = merge(args.data, cfg.path("data"));
    if let Some(data_dir) = data {
        let out_dir = required(merge(args.out_dir, cfg.path("out-dir")), "out-dir")?;
        std::fs::create_dir_all(&out_dir)?;
        let manifest = DatasetManifest::scan(&data_dir, model.cfg.mode, false)?;
        for entry in &manifest.entries {
            let rgb = imgio::load_rgb(&entry.rgb)?;
            let aux = if flow_mode { imgio::load_flow(&entry.aux)? } else { imgio::load_depth(&entry.aux)? };
            let (s_c, alpha) = infer_one(&model, &store, &rgb, &aux)?;
            let out_path = out_dir.join(format!("{}.png", entry.id));
            imgio::save_map(&out_path, &s_c)?;
            match alpha {
                Some(a) => println!("{}  alpha_bar {a:.4}", entry.id),
                None => println!("{}", entry.id),
            }
        }
        println!("wrote {} maps to {}", manifest.entries.len(), out_dir.display());
        return Ok(());
    }

    let rgb_path = required(merge(args.rgb, cfg.path("rgb")), "rgb")?;
    let aux_path = if flow_mode {
        required(merge(args.flow, cfg.path("flow")), "flow")?
    } else {
        required(merge(args.depth, cfg.path("depth")), "depth")?
    };
    let out = required(merge(args.out, cfg.path("out")), "out")?;
    let rgb = imgio::load_rgb(&rgb_path)?;
    let aux = if flow_mode { imgio::load_flow(&aux_path)? } else { imgio::load_depth(&aux_path)? };
    let (s_c, alpha) = infer_one(&model, &store, &rgb, &aux)?;
    imgio::save_map(&out, &s_c)?;
    match alpha {
        Some(a) => println!("wrote {}  (alpha_bar {a:.4})", out.display()),
        None => println!("wrote {}", out.display()),
    }
    Ok(())
}

// ---- eval -----------------------------------------------------------------

pub fn eval(args: EvalArgs) -> Result<()> {
    let cfg = Config::load(args.config.as_ref())?;
    let pred_dir = required(merge(args.pred, cfg.path("pred")), "pred")?;
    let gt_dir = required(merge(args.gt, cfg.path("gt")), "gt")?;
    let out = required(merge(args.out, cfg.path("out")), "out")?;

    let preds = crate::dataset::stems(&pred_dir)?;
    let gts = crate::dataset::stems(&gt_dir)?;
    let mut rows = Vec::new();
    let mut results = Vec::new();
    for (id, pred_path) in &preds {
        let gt_path = gts
            .get(id)
            .ok_or_else(|| CliError::MissingFile(gt_dir.join(format!("{id}.*"))))?;
        let mut pred = imgio::load_map(pred_path)?;
        let gt_map = imgio::load_map(gt_path)?;
        let gt_bin = Tensor::new(
            gt_map.shape().to_vec(),
            gt_map.iter().map(|&v| if v >= 0.5 { 1.0 } else { 0.0 }).collect(),
        )
        .expect("shape");
        if pred.shape() != gt_bin.shape() {
            // score at ground-truth extents
            let (h, w) = (gt_bin.dim(0), gt_bin.dim(1));
            let mut ctx = Ctx::infer();
            let p4 = pred.reshaped(vec![1, 1, pred.dim(0), pred.dim(1)])?;
            pred = ctx.resize_bilinear(&p4, h, w)?.reshaped(vec![h, w])?;
        }
        let r = dfmnet_core::metrics::evaluate(&pred, &gt_bin)?;
        rows.push(format!(
            "{id},{:.6},{:.6},{:.6},{:.6}",
            r.s_alpha, r.f_beta_max, r.e_xi_max, r.mae
        ));
        results.push(r);
    }
    if results.is_empty() {
        return Err(CliError::Data("no prediction/ground-truth pairs found".into()));
    }
    write_csv(&out, "id,s_alpha,f_max,e_max,mae", &rows)?;
    let mean = dfmnet_core::metrics::aggregate(&results);
    println!(
        "{} samples  S {:.4}  Fmax {:.4}  Emax {:.4}  MAE {:.4}",
        results.len(),
        mean.s_alpha,
        mean.f_beta_max,
        mean.e_xi_max,
        mean.mae
    );
    println!("wrote {}", out.display());
    Ok(())
}

// ---- bench ----------------------------------------------------------------

pub fn bench(args: BenchArgs) -> Result<()> {
    let cfg = Config::load(args.config.as_ref())?;
    let weights = required(merge(args.weights, cfg.path("weights")), "weights")?;
    let out = required(merge(args.out, cfg.path("out")), "out")?;
    let batches: Vec<usize> = merge(args.batch, cfg.string("batch"))
        .unwrap_or_else(|| "1".to_string())
        .split(',')
        .map(|tok| {
            tok.trim()
                .parse::<usize>()
                .map_err(|_| CliError::Usage(format!("bad batch size {tok:?}")))
        })
        .collect::<Result<_>>()?;
    let n = merge(args.n, cfg.usize("n")).unwrap_or(100);
    let input_hw = merge(args.input_size, cfg.usize("input-size")).unwrap_or(256);

    let (model, store) = load_model(&weights, &GateFlags::default(), &cfg, None)?;
    let report = size_report(&store);
    print!("{}", report.render());
    let latency = measure_latency_ms(&model, &store, input_hw)?;
    println!("t_cpu (median of 5, batch 1): {latency:.1} ms");

    let mut rows = Vec::new();
    for &b in &batches {
        let fps = measure_throughput(
            &model,
            &store,
            &ThroughputCfg { batch: b, n, input_hw, ..ThroughputCfg::default() },
        )?;
        println!("batch {b:>3}: {fps:.2} FPS (N = {n})");
        rows.push(format!("{b},{fps:.4}"));
    }
    write_csv(&out, "batch,s_fps", &rows)?;
    println!("wrote {}", out.display());
    Ok(())
}

// ---- quality --------------------------------------------------------------

fn load_pairs(dir: &Path) -> Result<Vec<QualityPair>> {
    let manifest = DatasetManifest::scan(dir, InputMode::Rgbd, false)?;
    manifest
        .entries
        .iter()
        .map(|e| {
            Ok(QualityPair {
                id: e.id.clone(),
                rgb: imgio::load_rgb(&e.rgb)?,
                depth: imgio::load_depth(&e.aux)?,
            })
        })
        .collect()
}

pub fn quality(args: QualityArgs) -> Result<()> {
    let cfg = Config::load(args.config.as_ref())?;
    let pairs_dir = required(merge(args.pairs, cfg.path("pairs")), "pairs")?;
    let out = required(merge(args.out, cfg.path("out")), "out")?;
    let shuffle = args.shuffle || cfg.bool("shuffle").unwrap_or(false);
    let seed = merge(args.seed, cfg.u64("seed")).unwrap_or(0);

    let pairs = load_pairs(&pairs_dir)?;
    let alpha_model = merge(args.alpha_from, cfg.path("alpha-from"))
        .map(|p| load_model(&p, &GateFlags::default(), &cfg, None))
        .transpose()?;

    let alpha_fn = alpha_model.as_ref().map(|(model, store)| {
        move |rgb: &Tensor, depth: &Tensor| -> dfmnet_core::Result<f32> {
            let mut ctx = Ctx::infer();
            let rgb = stack_samples(&[rgb])?;
            let depth = stack_samples(&[depth])?;
            let alpha = model.infer_alpha(&mut ctx, store, &rgb, &depth)?;
            Ok(alpha_vectors(&alpha)[0].alpha_bar)
        }
    });

    let report: QualityReport = match &alpha_fn {
        Some(f) => audit_set(
            &pairs,
            shuffle,
            seed,
            Some(f as &(dyn Fn(&Tensor, &Tensor) -> dfmnet_core::Result<f32> + Sync)),
        )?,
        None => audit_set(&pairs, shuffle, seed, None)?,
    };

    let rows: Vec<String> = report
        .per_sample
        .iter()
        .map(|s| match s.alpha_bar {
            Some(a) => format!("{},{:.6},{:.6}", s.id, s.c_dice, a),
            None => format!("{},{:.6},", s.id, s.c_dice),
        })
        .collect();
    write_csv(&out, "id,c_dice,alpha_bar", &rows)?;
    println!(
        "{} pairs{}  mean C_Dice {:.4}  std {:.4}",
        report.per_sample.len(),
        if shuffle { " (shuffled)" } else { "" },
        report.mean,
        report.std
    );
    println!("histogram: {:?}", report.histogram);
    println!("wrote {}", out.display());
    Ok(())
}
