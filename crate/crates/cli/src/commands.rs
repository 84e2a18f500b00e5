use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::Context;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use zsl_core::analysis::{
    affinity_matrix, agreement_coefficient, classname_affinity, export_projections as write_projections, records_from_report, related_subset_curve,
    split_projections, transfer_correlation, AffinityReport,
};
use zsl_core::dataio::{
    generate_clustered, generate_splits, generate_synthetic, write_features_binary, write_labels, ClusteredSpec, SyntheticData, SyntheticSpec,
    ZeroShotSplit,
};
use zsl_core::evaluation::{fit_split, run_experiment, ExperimentConfig, ExperimentData, ExperimentReport};
use zsl_core::inference::{predict as match_instances, self_train, DistanceMatrix};
use zsl_core::linalg::normalize_columns;
use zsl_core::regression::{EmbeddingModel, HyperParams};
use zsl_core::wordvec::PrototypeSource;

use crate::config::{config_error, Inputs, RunConfig};
use crate::{AnalyzeArgs, GenArgs, GenKind, PredictArgs, RunArgs, SplitArgs, SweepArgs};

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> anyhow::Result<()> {
    std::fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

/// Writes through a temporary sibling so a crash never leaves a partial file.
fn write_atomic(path: &Path, contents: impl AsRef<[u8]>) -> anyhow::Result<()> {
    let tmp = path.with_extension("partial");
    write_file(&tmp, contents)?;
    std::fs::rename(&tmp, path).with_context(|| format!("renaming {}", tmp.display()))
}

fn create_dir(path: &Path) -> anyhow::Result<()> {
    std::fs::create_dir_all(path).with_context(|| format!("creating {}", path.display()))
}

struct Loaded {
    cfg: RunConfig,
    inputs: Inputs,
    experiment: ExperimentConfig,
}

impl Loaded {
    fn new(cfg: RunConfig) -> anyhow::Result<Self> {
        let inputs = Inputs::load(&cfg)?;
        let experiment = cfg.experiment_config(&inputs.dataset)?;
        Ok(Loaded { cfg, inputs, experiment })
    }

    fn data(&self) -> ExperimentData<'_> {
        ExperimentData::new(&self.inputs.dataset, &self.inputs.source).with_aux(&self.inputs.aux)
    }

    fn split(&self, index: usize) -> anyhow::Result<ZeroShotSplit> {
        let n = self.experiment.n_splits;
        if index >= n {
            return Err(config_error(format!("split {index} out of range: the config defines {n} splits")));
        }
        let mut splits = generate_splits(self.inputs.dataset.num_classes(), n, self.experiment.seed)?;
        Ok(splits.swap_remove(index))
    }
}

/// Writes report.json (timing stripped, so reruns are byte-identical),
/// report.csv and the run time.
fn write_report(dir: &Path, report: &ExperimentReport) -> anyhow::Result<()> {
    write_file(&dir.join("report.csv"), csv_of(report))?;
    write_file(
        &dir.join("timing.json"),
        serde_json::json!({ "runtime_seconds": report.runtime_seconds }).to_string(),
    )?;
    write_atomic(&dir.join("report.json"), report.without_timing().to_json())
}

fn csv_of(report: &ExperimentReport) -> String {
    let mut s = String::from("split_id,metric\n");
    for r in &report.per_split {
        writeln!(s, "{},{}", r.split_id, r.value).unwrap();
    }
    s
}

fn write_predictions(path: &Path, report: &ExperimentReport, class_names: &[String]) -> anyhow::Result<()> {
    let mut s = String::from("split_id,instance_id,true_class,predicted_class\n");
    for r in &report.per_split {
        let Some(p) = &r.predictions else { continue };
        for ((&i, &t), &y) in p.instances.iter().zip(&p.truth).zip(&p.predicted) {
            writeln!(s, "{},{i},{},{}", r.split_id, class_names[t], class_names[y]).unwrap();
        }
    }
    write_file(path, s)
}

pub fn eval(args: &RunArgs, threads: usize) -> anyhow::Result<()> {
    let loaded = Loaded::new(args.resolve()?)?;
    let out = loaded.cfg.output_dir()?.to_path_buf();
    let report = run_experiment(loaded.data(), &loaded.experiment, threads)?;
    create_dir(&out)?;
    write_file(&out.join("config.toml"), loaded.cfg.to_toml())?;
    if loaded.cfg.output.retain_predictions {
        write_predictions(&out.join("predictions.csv"), &report, &loaded.inputs.dataset.class_names)?;
    }
    write_report(&out, &report)?;
    println!(
        "{}: {:?} {:.4} ± {:.4} over {} splits ({:.1}s)",
        report.dataset,
        report.config.metric,
        report.mean,
        report.std,
        report.per_split.len(),
        report.runtime_seconds
    );
    Ok(())
}

fn or_default<T: Copy>(values: &[T], default: T) -> Vec<T> {
    if values.is_empty() {
        vec![default]
    } else {
        values.to_vec()
    }
}

/// Cell directory name: hash of the resolved config without its output location.
fn cell_key(cfg: &RunConfig) -> String {
    let mut keyed = cfg.clone();
    keyed.output.dir = None;
    Sha256::digest(keyed.to_toml().as_bytes())
        .iter()
        .take(8)
        .map(|b| format!("{b:02x}"))
        .collect()
}

pub fn sweep(args: &SweepArgs, threads: usize) -> anyhow::Result<()> {
    let base = args.run.resolve()?;
    let out = base.output_dir()?.to_path_buf();
    let h = base.hyper;
    let mut grid = Vec::new();
    for &ridge in &or_default(&args.ridges, h.ridge) {
        if ridge <= 0.0 {
            return Err(config_error(format!(
                "ridge weight {ridge} is not allowed: without ridge regularization the kernel system is singular and accuracy falls to near random"
            )));
        }
        for &manifold in &or_default(&args.manifolds, h.manifold) {
            for &graph_k in &or_default(&args.graph_ks, h.graph_k) {
                for &self_train_k in &or_default(&args.st_ks, h.self_train_k) {
                    let hyper = HyperParams {
                        ridge,
                        manifold,
                        graph_k,
                        self_train_k,
                    };
                    hyper.validate()?;
                    grid.push(hyper);
                }
            }
        }
    }

    let mut loaded = Loaded::new(base)?;
    let cells_dir = out.join("cells");
    create_dir(&cells_dir)?;
    let mut summary = String::from("cell,ridge,manifold,graph_k,self_train_k,mean,std\n");
    let (mut ran, mut skipped) = (0, 0);
    for hyper in grid {
        loaded.cfg.hyper = hyper;
        loaded.experiment.hyper = hyper;
        let key = cell_key(&loaded.cfg);
        let dir = cells_dir.join(&key);
        let report_path = dir.join("report.json");
        let report = match ExperimentReport::read_json(&report_path) {
            Ok(r) if r.config == loaded.experiment => {
                log::info!("cell {key} already done, skipping");
                skipped += 1;
                r
            }
            _ => {
                log::info!("cell {key}: {hyper:?}");
                let report = run_experiment(loaded.data(), &loaded.experiment, threads)?;
                create_dir(&dir)?;
                let mut cell_cfg = loaded.cfg.clone();
                cell_cfg.output.dir = Some(dir.clone());
                write_file(&dir.join("config.toml"), cell_cfg.to_toml())?;
                write_report(&dir, &report)?;
                ran += 1;
                report
            }
        };
        writeln!(
            summary,
            "{key},{},{},{},{},{},{}",
            hyper.ridge, hyper.manifold, hyper.graph_k, hyper.self_train_k, report.mean, report.std
        )
        .unwrap();
    }
    write_file(&out.join("summary.csv"), summary)?;
    println!(
        "sweep: {ran} cells run, {skipped} reused, summary in {}",
        out.join("summary.csv").display()
    );
    Ok(())
}

fn write_word_vectors(path: &Path, syn: &SyntheticData) -> anyhow::Result<()> {
    let mut s = String::new();
    for (j, name) in syn.prototypes.names.iter().enumerate() {
        s.push_str(name);
        for v in syn.prototypes.matrix.column(j) {
            write!(s, " {v}").unwrap();
        }
        s.push('\n');
    }
    write_file(path, s)
}

#[derive(Serialize)]
#[serde(untagged)]
enum Generated {
    Planted(SyntheticSpec),
    Clustered(ClusteredSpec),
}

pub fn gen_synthetic(args: &GenArgs) -> anyhow::Result<()> {
    let (spec, syn) = match args.kind {
        GenKind::Planted => {
            let d = SyntheticSpec::default();
            let spec = SyntheticSpec {
                train_classes: args.train_classes.unwrap_or(d.train_classes),
                test_classes: args.test_classes.unwrap_or(d.test_classes),
                per_class: args.per_class.unwrap_or(d.per_class),
                feature_dim: args.feature_dim.unwrap_or(d.feature_dim),
                embed_dim: args.embed_dim.unwrap_or(d.embed_dim),
                noise_sigma: args.noise.unwrap_or(d.noise_sigma),
                shift_sigma: args.shift.unwrap_or(d.shift_sigma),
                test_noise_sigma: args.test_noise.unwrap_or(d.test_noise_sigma),
                seed: args.seed,
            };
            let syn = generate_synthetic(&spec)?;
            (Generated::Planted(spec), syn)
        }
        GenKind::Clustered => {
            let d = ClusteredSpec::default();
            let spec = ClusteredSpec {
                clusters: args.clusters.unwrap_or(d.clusters),
                classes_per_cluster: args.classes_per_cluster.unwrap_or(d.classes_per_cluster),
                per_class: args.per_class.unwrap_or(d.per_class),
                feature_dim: args.feature_dim.unwrap_or(d.feature_dim),
                embed_dim: args.embed_dim.unwrap_or(d.embed_dim),
                noise_sigma: args.noise.unwrap_or(d.noise_sigma),
                seed: args.seed,
                ..d
            };
            let syn = generate_clustered(&spec)?;
            (Generated::Clustered(spec), syn)
        }
    };
    let out = &args.out;
    create_dir(out)?;
    write_features_binary(out.join("features.zslf"), &syn.dataset.features)?;
    write_labels(out.join("labels.txt"), &syn.dataset)?;
    write_word_vectors(&out.join("class_vectors.txt"), &syn)?;
    let truth = serde_json::json!({ "spec": spec, "designated_split": syn.split });
    write_file(&out.join("truth.json"), serde_json::to_string_pretty(&truth)?)?;

    // paths relative to the config file, so the directory can be moved
    let mut cfg = RunConfig::default();
    cfg.data.features = Some("features.zslf".into());
    cfg.data.labels = Some("labels.txt".into());
    cfg.data.word_vectors = Some("class_vectors.txt".into());
    cfg.output.dir = Some("results".into());
    write_file(&out.join("run.toml"), cfg.to_toml())?;

    let ds = &syn.dataset;
    println!(
        "wrote {} instances of {} classes (d_x {}, d_z {}) to {}",
        ds.len(),
        ds.num_classes(),
        ds.feature_dim(),
        syn.prototypes.dim(),
        out.display()
    );
    println!("designated split: train {:?}, test {:?}", syn.split.train_classes, syn.split.test_classes);
    println!("run it with: zsl eval --config {}", out.join("run.toml").display());
    Ok(())
}

pub fn analyze(args: &AnalyzeArgs, threads: usize) -> anyhow::Result<()> {
    let report = ExperimentReport::read_json(&args.report)?;
    let config_path = match &args.config {
        Some(p) => p.clone(),
        None => args
            .report
            .parent()
            .map(|d| d.join("config.toml"))
            .unwrap_or_else(|| PathBuf::from("config.toml")),
    };
    let cfg = RunConfig::load(&config_path)?;
    let inputs = Inputs::load(&cfg)?;
    let ds = &inputs.dataset;
    let c = ds.num_classes();
    let records = records_from_report(&report, c)?;
    let classes = inputs.source.class_matrix(&ds.class_names)?;
    let names = &ds.class_names;
    create_dir(&args.out)?;

    let corr = transfer_correlation(&records, args.norm)?;
    corr.write_csv(args.out.join("correlation.csv"), names)?;
    let affinity = AffinityReport::new(classes.matrix.view())?;
    affinity.write_csv(args.out.join("affinity.csv"), args.out.join("affinity_percentile.csv"), names)?;

    let mut rel = String::from("split_id,class,max,mean,min\n");
    for r in &report.per_split {
        let s = classname_affinity(classes.matrix.view(), &r.test_classes)?;
        for &i in &r.train_classes {
            writeln!(rel, "{},{},{},{},{}", r.split_id, names[i], s.max[i], s.mean[i], s.min[i]).unwrap();
        }
    }
    write_file(&args.out.join("relatedness.csv"), rel)?;

    let agreement = match agreement_coefficient(&corr, &affinity_matrix(classes.matrix.view())) {
        Ok(a) => Some(a),
        Err(e) => {
            log::warn!("agreement coefficient unavailable: {e}");
            None
        }
    };

    let mut curve = None;
    if args.curve_splits > 0 {
        let splits = generate_splits(c, report.config.n_splits, report.config.seed)?;
        for (s, r) in splits.iter().zip(&report.per_split) {
            if s.train_classes != r.train_classes || s.test_classes != r.test_classes {
                return Err(config_error(format!(
                    "split {} of the report does not match the config's splits",
                    r.split_id
                )));
            }
        }
        let n = args.curve_splits.min(splits.len());
        let config = ExperimentConfig {
            retain_predictions: false,
            ..report.config.clone()
        };
        let data = ExperimentData::new(ds, &inputs.source).with_aux(&inputs.aux);
        let c = related_subset_curve(data, &config, &splits[..n], &args.percents, args.op, threads)?;
        c.write_csv(args.out.join("curve.csv"))?;
        curve = Some(c);
    }

    let summary = serde_json::json!({
        "valid_pairs": corr.num_valid(),
        "agreement": agreement,
        "first_crossing": curve.as_ref().and_then(|c| c.first_crossing()),
        "baseline": curve.as_ref().map(|c| c.baseline),
    });
    write_file(&args.out.join("summary.json"), serde_json::to_string_pretty(&summary)?)?;
    println!("{summary}");
    Ok(())
}

pub fn export_projections(args: &SplitArgs) -> anyhow::Result<()> {
    let loaded = Loaded::new(args.run.resolve()?)?;
    let out = loaded.cfg.output_dir()?.to_path_buf();
    let split = loaded.split(args.split)?;
    let rows = split_projections(loaded.data(), &loaded.experiment, &split)?;
    create_dir(&out)?;
    let path = out.join(format!("projections_split{}.csv", args.split));
    write_projections(&path, &rows)?;
    println!("wrote {} rows to {}", rows.len(), path.display());
    Ok(())
}

/// Split stored next to a saved model.
#[derive(Serialize, Deserialize)]
struct SavedSplit {
    split: ZeroShotSplit,
    test_class_names: Vec<String>,
}

fn model_paths(out: &Path, split: usize) -> (PathBuf, PathBuf) {
    (out.join(format!("model_split{split}.zsla")), out.join(format!("split{split}.json")))
}

pub fn fit(args: &SplitArgs) -> anyhow::Result<()> {
    let loaded = Loaded::new(args.run.resolve()?)?;
    let out = loaded.cfg.output_dir()?.to_path_buf();
    let split = loaded.split(args.split)?;
    let ds = &loaded.inputs.dataset;
    let classes = loaded.inputs.source.class_matrix(&ds.class_names)?;
    let fitted = fit_split(loaded.data(), &classes, &loaded.experiment, &split)?;
    create_dir(&out)?;
    let (model_path, split_path) = model_paths(&out, args.split);
    fitted.model.save(&model_path)?;
    let saved = SavedSplit {
        test_class_names: split.test_classes.iter().map(|&c| ds.class_names[c].clone()).collect(),
        split,
    };
    write_file(&split_path, serde_json::to_string_pretty(&saved)?)?;
    write_file(&out.join("config.toml"), loaded.cfg.to_toml())?;
    println!("saved {:?} model to {}", fitted.model.variant, model_path.display());
    Ok(())
}

pub fn predict(args: &PredictArgs) -> anyhow::Result<()> {
    let loaded = Loaded::new(args.split.run.resolve()?)?;
    let out = loaded.cfg.output_dir()?.to_path_buf();
    let (default_model, split_path) = model_paths(&out, args.split.split);
    let model_path = args.model.clone().unwrap_or(default_model);
    let model = EmbeddingModel::load(&model_path)?;
    let text = std::fs::read_to_string(&split_path).with_context(|| format!("reading {} (run `zsl fit` first)", split_path.display()))?;
    let saved: SavedSplit = serde_json::from_str(&text).with_context(|| format!("parsing {}", split_path.display()))?;
    let ds = &loaded.inputs.dataset;
    if saved
        .test_class_names
        .iter()
        .zip(&saved.split.test_classes)
        .any(|(n, &c)| ds.class_names.get(c) != Some(n))
    {
        return Err(config_error(format!("{} was written for a different dataset", split_path.display())));
    }

    let rows = ds.rows_of(&saved.split.test_classes);
    let projections = model.project(ds.rows(&rows).view())?.vectors;
    let classes = loaded.inputs.source.class_matrix(&ds.class_names)?;
    let mut prototypes = classes.select(&saved.split.test_classes);
    normalize_columns(&mut prototypes);
    let exp = &loaded.experiment;
    if exp.self_train {
        prototypes = self_train(prototypes.view(), projections.view(), exp.hyper.self_train_k, exp.renormalize_adapted)?;
    }
    let distances = DistanceMatrix::between(projections.view(), prototypes.view())?;
    let mut prediction = match_instances(exp.matcher, &distances)?;
    prediction.self_trained = exp.self_train;
    let path = out.join(format!("predictions_split{}.csv", args.split.split));
    prediction.write_csv(&path, &rows, &saved.test_class_names)?;

    let correct = rows
        .iter()
        .zip(&prediction.labels)
        .filter(|(&r, &p)| ds.labels[r] == saved.split.test_classes[p])
        .count();
    println!(
        "{} instances, accuracy {:.4}, predictions in {}",
        rows.len(),
        correct as f64 / rows.len() as f64,
        path.display()
    );
    Ok(())
}
