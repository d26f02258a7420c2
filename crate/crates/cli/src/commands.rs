use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use proxbundle::data::LabeledFeatures;
use proxbundle::geometry::{
    class_distance_matrix, embedding_csv, separability_report, tsne_embed, GeometryStats, TsneConfig,
};
use proxbundle::linalg::pxb;
use proxbundle::prox::{default_step, unroll, CoefficientMatrix, FeatureMatrix, ProxSchedule};
use proxbundle::train::{evaluate, parse_placements, placement_sweep, sweep_csv, Model, RunReport};
use proxbundle::Matrix;

use crate::config::ExperimentConfig;
use crate::Failure;

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<(), Failure> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Failure::runtime(format!("cannot create {}: {e}", dir.display())))?;
    }
    fs::write(path, contents).map_err(|e| Failure::runtime(format!("cannot write {}: {e}", path.display())))
}

fn write_matrix(path: &Path, m: &Matrix) -> Result<(), Failure> {
    write(path, pxb::encode(&pxb::Tensor::new(vec![m.rows(), m.cols()], m.as_slice().to_vec()).map_err(Failure::runtime)?))
}

fn json_pretty(v: &impl serde::Serialize) -> Result<String, Failure> {
    serde_json::to_string_pretty(v).map(|s| s + "\n").map_err(Failure::runtime)
}

fn load_experiment(config: &Path, seed: Option<u64>) -> Result<ExperimentConfig, Failure> {
    let mut cfg = ExperimentConfig::load(config)?;
    if let Some(s) = seed {
        cfg.train.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn out_dir(flag: Option<PathBuf>, cfg: &ExperimentConfig) -> PathBuf {
    flag.or_else(|| cfg.out.clone()).unwrap_or_else(|| PathBuf::from("out"))
}

fn say(line: &str) {
    let _ = writeln!(std::io::stdout().lock(), "{line}");
}

/// Writes `report.json`, `train_log.jsonl`, `checkpoint/` and `features/`.
pub fn train(config: &Path, seed: Option<u64>, out: Option<PathBuf>) -> Result<(), Failure> {
    let cfg = load_experiment(config, seed)?;
    let out = out_dir(out, &cfg);
    let data = cfg.dataset()?;
    if data.train.is_empty() {
        return Err(Failure::usage("the training split is empty"));
    }
    let outcome = proxbundle::train::train(&cfg.vit, &cfg.train, &data).map_err(Failure::runtime)?;

    write(&out.join("report.json"), json_pretty(&outcome.report)?)?;
    let mut log = String::new();
    for entry in &outcome.log {
        log += &serde_json::to_string(entry).map_err(Failure::runtime)?;
        log.push('\n');
    }
    write(&out.join("train_log.jsonl"), log)?;
    let stored = ExperimentConfig { out: None, ..cfg.clone() };
    let extra = serde_json::to_value(&stored).map_err(Failure::runtime)?;
    outcome.model.save(out.join("checkpoint"), extra).map_err(Failure::runtime)?;

    let split = if data.test.is_empty() { &data.train } else { &data.test };
    let model = &outcome.model;
    let ev = evaluate(model, &data, split, &model.placement, cfg.train.batch_size, cfg.train.seed).map_err(Failure::runtime)?;
    let features = out.join("features");
    write_matrix(&features.join("pre.pxb"), &ev.pre)?;
    write_matrix(&features.join("post.pxb"), &ev.post)?;
    write(&features.join("labels.json"), serde_json::to_string(&ev.labels).map_err(Failure::runtime)?)?;
    if let Some(w) = &ev.coefficients {
        write_matrix(&features.join("coefficients.pxb"), w)?;
    }
    say(&summary(&outcome.report, &out));
    Ok(())
}

fn summary(r: &RunReport, out: &Path) -> String {
    let acc = r.final_test_accuracy.map_or("n/a".to_string(), |a| format!("{a:.4}"));
    format!(
        "{:?} placement {:?}: train accuracy {:.4}, test accuracy {acc}; wrote {}",
        r.variant,
        r.placement,
        r.final_train_accuracy,
        out.display()
    )
}

/// Writes `sweep.csv` with one row per placement.
pub fn sweep(config: &Path, placements: Option<&str>, seed: Option<u64>, out: Option<PathBuf>) -> Result<(), Failure> {
    let cfg = load_experiment(config, seed)?;
    let spec = placements
        .map(str::to_string)
        .or_else(|| cfg.sweep.as_ref().map(|s| s.placements.clone()))
        .ok_or_else(|| Failure::usage("no placements: pass --placements or set sweep.placements"))?;
    let list = parse_placements(&spec, cfg.vit.num_layers).map_err(Failure::usage)?;
    if list.iter().any(|p| !p.is_empty()) && cfg.train.variant == proxbundle::train::Variant::Baseline {
        return Err(Failure::usage("a sweep over placements needs a prox variant"));
    }
    let out = out_dir(out, &cfg);
    let data = cfg.dataset()?;
    let rows = placement_sweep(&cfg.vit, &cfg.train, &data, &list).map_err(Failure::runtime)?;
    write(&out.join("sweep.csv"), sweep_csv(&rows))?;
    say(&format!("{} placements; wrote {}", rows.len(), out.join("sweep.csv").display()));
    Ok(())
}

pub struct GeometryOptions {
    pub features: PathBuf,
    pub labels: PathBuf,
    pub post: Option<PathBuf>,
    pub tsne: bool,
    pub perplexity: f64,
    pub tsne_iterations: usize,
    pub seed: u64,
    pub out: PathBuf,
}

fn load_features(features: &Path, labels: &Path) -> Result<LabeledFeatures, Failure> {
    let lf = LabeledFeatures::load(features, labels)
        .map_err(|e| Failure::usage(format!("cannot load {} with {}: {e}", features.display(), labels.display())))?;
    let present = (0..lf.num_classes()).filter(|&c| !lf.class_indices(c).is_empty()).count();
    if present != lf.num_classes() || present < 2 {
        return Err(Failure::usage("labels must cover classes 0..c with c ≥ 2 and every class non-empty"));
    }
    Ok(lf)
}

/// Writes `distances.csv` (and `distances_post.csv`), `separability.json`, and
/// with `--tsne` the embeddings with their KL traces. Without `--post` the
/// separability report compares the features with themselves.
pub fn geometry(o: &GeometryOptions) -> Result<(), Failure> {
    let pre = load_features(&o.features, &o.labels)?;
    let post = match &o.post {
        Some(p) => {
            let post = load_features(p, &o.labels)?;
            if post.features.cols() != pre.features.cols() {
                return Err(Failure::usage("pre and post features hold different sample counts"));
            }
            Some(post)
        }
        None => None,
    };
    let tsne_cfg = TsneConfig {
        perplexity: o.perplexity,
        iterations: o.tsne_iterations,
        seed: o.seed,
        ..TsneConfig::default()
    };
    if o.tsne {
        tsne_cfg.validate(pre.features.cols()).map_err(Failure::usage)?;
    }

    write(&o.out.join("distances.csv"), class_distance_matrix(&pre).map_err(Failure::runtime)?.to_csv())?;
    let report = match &post {
        Some(post) => {
            write(&o.out.join("distances_post.csv"), class_distance_matrix(post).map_err(Failure::runtime)?.to_csv())?;
            separability_report(&pre, post)
        }
        None => separability_report(&pre, &pre),
    }
    .map_err(Failure::runtime)?;
    write(&o.out.join("separability.json"), json_pretty(&report)?)?;

    if o.tsne {
        let mut sets = vec![("tsne", &pre)];
        if let Some(post) = &post {
            sets.push(("tsne_post", post));
        }
        for (name, lf) in sets {
            let res = tsne_embed(&lf.features, &tsne_cfg).map_err(Failure::runtime)?;
            write(&o.out.join(format!("{name}.csv")), embedding_csv(&res.embedding, &lf.labels).map_err(Failure::runtime)?)?;
            let mut kl = String::from("iteration,kl\n");
            for (t, v) in res.kl_trace.iter().enumerate() {
                kl += &format!("{},{v:?}\n", t + 1);
            }
            write(&o.out.join(format!("{name}_kl.csv")), kl)?;
        }
    }
    let stats: &GeometryStats = &report.post;
    say(&format!(
        "{} classes: mean intra-class {:.4}, mean inter-class {:.4}; wrote {}",
        stats.intra_class.len(),
        stats.mean_intra_class,
        stats.mean_inter_class,
        o.out.display()
    ));
    Ok(())
}

pub struct ProxBenchOptions {
    pub features: PathBuf,
    pub lambda: f64,
    pub k_max: usize,
    pub zero_diagonal: bool,
    pub identity_start: bool,
    pub checkpoint: Option<PathBuf>,
    pub block: Option<usize>,
    pub out: PathBuf,
}

/// Writes `trace.csv` (objective per iterate, starting with `W_0`) and `w.pxb`.
pub fn prox_bench(o: &ProxBenchOptions) -> Result<(), Failure> {
    let z = pxb::read_matrix(&o.features).map_err(|e| Failure::usage(format!("cannot load {}: {e}", o.features.display())))?;
    let z = FeatureMatrix::new(z).map_err(Failure::usage)?;
    let m = z.batch();
    let (schedule, w0) = match &o.checkpoint {
        Some(dir) => {
            let model = Model::load(dir).map_err(|e| Failure::usage(format!("cannot load checkpoint {}: {e}", dir.display())))?;
            let block = o
                .block
                .or_else(|| model.placement.blocks().last().copied())
                .ok_or_else(|| Failure::usage("the checkpoint has no prox placement"))?;
            if z.as_matrix().rows() != model.vit_config.embed_dim {
                return Err(Failure::usage(format!(
                    "features have {} rows but the checkpoint's tokens have {}",
                    z.as_matrix().rows(),
                    model.vit_config.embed_dim
                )));
            }
            let schedule = model.placement.resolve(block, &z).map_err(Failure::usage)?;
            (schedule, model.placement.w0.matrix(m))
        }
        None => {
            let gamma = default_step(&z).map_err(Failure::runtime)?;
            let s = ProxSchedule::fixed(gamma, o.k_max, o.lambda).with_zero_diagonal(o.zero_diagonal);
            s.validate().map_err(Failure::usage)?;
            let w0 = if o.identity_start { Matrix::identity(m) } else { Matrix::zeros(m, m) };
            (s, w0)
        }
    };
    let w0 = CoefficientMatrix::new(w0).map_err(Failure::runtime)?;
    let rep = unroll(&z, &schedule, &w0).map_err(Failure::runtime)?;
    let mut trace = String::from("iteration,objective\n");
    for (k, v) in rep.objective_trace.iter().enumerate() {
        trace += &format!("{k},{v:?}\n");
    }
    write(&o.out.join("trace.csv"), trace)?;
    write_matrix(&o.out.join("w.pxb"), rep.w_final.as_matrix())?;
    say(&format!(
        "{} iterations on {m} samples: objective {:?} -> {:?}; wrote {}",
        schedule.k_max(),
        rep.objective_trace[0],
        rep.objective_trace.last().copied().unwrap_or_default(),
        o.out.display()
    ));
    Ok(())
}
