use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use super::config::{CurveFunction, ExperimentConfig, ExperimentKind, Method};
use super::noise::{layer_histogram, mean_in_order, noise_sweep, FIG5_RADIUS};
use crate::datascope::{
    dataset_lipschitz_lower_bound, gap, incompatible_pair_fraction, margin, margin_output,
    pair_stats, write_fraction_csv, write_quantity_csv, LabeledDataset, NormScaling, QuantityRow,
};
use crate::error::{Error, Result};
use crate::graphreg::write_sigma_csv;
use crate::netfun::{load_checkpoint, train, write_checkpoint, Network};
use crate::norm::Norm;
use crate::robustometry::{
    alpha_r_curve, check_compositional_bound, default_lambda_grid, interpolation_sweep, Identity,
    Sampling, Sigmoid, VectorFunction,
};
use crate::tensor::Tensor;

pub const MANIFEST: &str = "manifest";
pub const CONFIG_ECHO: &str = "config_echo";
pub const COMPOSITION_RADIUS: f64 = 0.05;

/// Files written by one experiment, with their SHA-256 digests.
#[derive(Clone, Debug, PartialEq)]
pub struct RunSummary {
    pub dir: PathBuf,
    pub files: Vec<(String, String)>,
}

impl RunSummary {
    pub fn manifest_path(&self) -> PathBuf {
        self.dir.join(MANIFEST)
    }
}

#[derive(Default)]
struct Outputs {
    files: BTreeMap<String, Vec<u8>>,
}

impl Outputs {
    fn add(&mut self, name: impl Into<String>, bytes: Vec<u8>) {
        self.files.insert(name.into(), bytes);
    }

    fn csv(
        &mut self,
        name: impl Into<String>,
        write: impl FnOnce(&mut Vec<u8>) -> Result<()>,
    ) -> Result<()> {
        let mut buf = Vec::new();
        write(&mut buf)?;
        self.add(name, buf);
        Ok(())
    }

    fn flush(self, dir: &Path) -> Result<RunSummary> {
        fs::create_dir_all(dir)?;
        let mut listing = String::new();
        let mut files = Vec::with_capacity(self.files.len());
        for (name, bytes) in &self.files {
            fs::write(dir.join(name), bytes)?;
            let digest = hex::encode(Sha256::digest(bytes));
            listing.push_str(&format!("{digest}  {name}\n"));
            files.push((name.clone(), digest));
        }
        fs::write(dir.join(MANIFEST), listing)?;
        Ok(RunSummary {
            dir: dir.to_path_buf(),
            files,
        })
    }
}

/// Loads, validates and runs a config file. `out` overrides the configured
/// output directory and `seed` replaces the seed list.
pub fn run_experiment(
    config_path: &Path,
    out: Option<&Path>,
    seed: Option<u64>,
) -> Result<RunSummary> {
    let mut cfg = ExperimentConfig::load(config_path)?;
    if let Some(s) = seed {
        cfg.seeds = vec![s];
    }
    let dir = match (out, &cfg.output_dir) {
        (Some(o), _) => o.to_path_buf(),
        (None, Some(o)) => o.clone(),
        (None, None) => {
            return Err(Error::config(
                "output_dir",
                "no output directory (set it or pass --out)",
            ))
        }
    };
    run_config(&cfg, &dir)
}

/// Runs an already parsed config, writing everything under `dir`.
pub fn run_config(cfg: &ExperimentConfig, dir: &Path) -> Result<RunSummary> {
    cfg.validate()?;
    let data = cfg.dataset.load()?.with_scaling(cfg.scaling);
    let mut out = Outputs::default();
    out.add(CONFIG_ECHO, cfg.echo()?.into_bytes());
    match cfg.kind {
        ExperimentKind::Train => run_train(cfg, &data, &mut out)?,
        ExperimentKind::NoiseSweep => run_noise(cfg, &data, &mut out)?,
        ExperimentKind::Interpolate => run_interpolate(cfg, &data, &mut out)?,
        ExperimentKind::LayerHist => run_layer_hist(cfg, &data, &mut out)?,
        ExperimentKind::AlphaCurve => run_alpha_curve(cfg, &data, &mut out)?,
        ExperimentKind::DatasetAudit => run_audit(cfg, &data, &mut out)?,
        ExperimentKind::CompositionCheck => run_composition(cfg, &data, &mut out)?,
    }
    out.flush(dir)
}

struct Trained {
    label: String,
    seed: u64,
    net: Network,
}

/// One network per (method, seed): trained from the spec, or the shared
/// checkpoint. Training artifacts are added to `out`.
fn networks(
    cfg: &ExperimentConfig,
    data: &LabeledDataset,
    out: &mut Outputs,
) -> Result<Vec<Trained>> {
    let spec = cfg
        .network
        .as_ref()
        .ok_or_else(|| Error::config("network", "missing"))?;
    if let Some(path) = &spec.checkpoint {
        let net = load_checkpoint(path)?;
        return Ok(cfg
            .seeds
            .iter()
            .map(|&seed| Trained {
                label: "checkpoint".into(),
                seed,
                net: net.clone(),
            })
            .collect());
    }
    let specs = spec
        .layer_specs(data.dim(), data.classes())
        .expect("validated: layers or residual preset");
    let mut nets = Vec::new();
    let mut summary = String::from("method,seed,train_accuracy,final_loss,delta_l2,delta_linf\n");
    for &method in &cfg.methods {
        for &seed in &cfg.seeds {
            let init = Network::new(data.dim(), &specs, seed)?;
            let (net, log) = train(&init, data, &cfg.train.config(method, seed))?;
            let tag = format!("{}_seed{seed}", method.name());
            let mut ckpt = Vec::new();
            write_checkpoint(&net, &mut ckpt)?;
            out.add(format!("net_{tag}.ckpt"), ckpt);
            out.csv(format!("loss_{tag}.csv"), |w| log.write_loss_csv(w))?;
            if method == Method::Laplacian {
                out.csv(format!("sigma_{tag}.csv"), |w| {
                    write_sigma_csv(w, &log.sigma_rows())
                })?;
            }
            summary.push_str(&format!(
                "{},{seed},{:?},{:?},{:?},{:?}\n",
                method.name(),
                log.train_accuracy,
                log.epochs.last().map_or(f64::NAN, |e| e.loss),
                log.delta.l2,
                log.delta.linf
            ));
            nets.push(Trained {
                label: method.name().into(),
                seed,
                net,
            });
        }
    }
    out.add("train_summary.csv", summary.into_bytes());
    Ok(nets)
}

fn run_train(cfg: &ExperimentConfig, data: &LabeledDataset, out: &mut Outputs) -> Result<()> {
    networks(cfg, data, out).map(|_| ())
}

fn run_noise(cfg: &ExperimentConfig, data: &LabeledDataset, out: &mut Outputs) -> Result<()> {
    let eval_spec = cfg
        .eval_dataset
        .clone()
        .unwrap_or_else(|| cfg.dataset.held_out());
    let eval = eval_spec.load()?;
    let nets = networks(cfg, data, out)?;
    let mut by_label: BTreeMap<String, Vec<Vec<f64>>> = BTreeMap::new();
    let mut order = Vec::new();
    for t in &nets {
        let res = noise_sweep(&t.net, &eval, &cfg.snr_db, cfg.runs, t.seed, cfg.noise)?;
        out.csv(format!("noise_sweep_{}_seed{}.csv", t.label, t.seed), |w| {
            res.write_csv(w)
        })?;
        if !by_label.contains_key(&t.label) {
            order.push(t.label.clone());
        }
        by_label.entry(t.label.clone()).or_default().push(res.mean);
    }
    let mut text = String::from("snr_db,method,mean_accuracy\n");
    for label in &order {
        let means = &by_label[label];
        for (k, s) in cfg.snr_db.iter().enumerate() {
            let m = mean_in_order(means.iter().map(|v| v[k]));
            text.push_str(&format!("{s:?},{label},{m:?}\n"));
        }
    }
    out.add("noise_sweep_mean.csv", text.into_bytes());
    Ok(())
}

fn run_interpolate(cfg: &ExperimentConfig, data: &LabeledDataset, out: &mut Outputs) -> Result<()> {
    let (i, j) = match cfg.pair {
        Some(p) => p,
        None => {
            let j = (1..data.len())
                .find(|&j| data.labels()[j] != data.labels()[0])
                .ok_or_else(|| Error::config("pair", "dataset has a single class; give `pair`"))?;
            (0, j)
        }
    };
    if i >= data.len() || j >= data.len() {
        return Err(Error::config(
            "pair",
            format!("indices beyond dataset size {}", data.len()),
        ));
    }
    let lambdas = cfg.lambdas.clone().unwrap_or_else(default_lambda_grid);
    let classes = Some((data.labels()[i], data.labels()[j]));
    for t in networks(cfg, data, out)? {
        let sweep = interpolation_sweep(&t.net, data.input(i), data.input(j), &lambdas, classes)?;
        out.csv(
            format!("interpolation_{}_seed{}.csv", t.label, t.seed),
            |w| sweep.write_csv(w),
        )?;
    }
    Ok(())
}

fn run_layer_hist(cfg: &ExperimentConfig, data: &LabeledDataset, out: &mut Outputs) -> Result<()> {
    if cfg.example >= data.len() {
        return Err(Error::config(
            "example",
            format!("index beyond dataset size {}", data.len()),
        ));
    }
    let r = cfg.radius.unwrap_or(FIG5_RADIUS);
    let mut text = String::from("method,seed,layer,kind,alpha_hat,r,norm\n");
    for t in networks(cfg, data, out)? {
        for bar in layer_histogram(
            &t.net,
            data.input(cfg.example),
            r,
            cfg.samples,
            t.seed,
            cfg.norm,
        )? {
            text.push_str(&format!(
                "{},{},{},{},{:?},{r:?},{}\n",
                t.label, t.seed, bar.layer, bar.kind, bar.alpha_hat, cfg.norm
            ));
        }
    }
    out.add("layer_hist.csv", text.into_bytes());
    Ok(())
}

fn leading_points(data: &LabeledDataset, k: usize) -> Result<Tensor> {
    let idx: Vec<usize> = (0..k.min(data.len())).collect();
    Ok(data.select(&idx)?.inputs().clone())
}

fn sampling(cfg: &ExperimentConfig, seed: u64) -> Sampling {
    Sampling {
        norm: cfg.norm,
        samples: cfg.samples,
        grid: cfg.grid,
        seed,
    }
}

fn write_curve(
    out: &mut Outputs,
    cfg: &ExperimentConfig,
    label: &str,
    seed: u64,
    f: &dyn VectorFunction,
    points: &Tensor,
) -> Result<()> {
    let curve = alpha_r_curve(f, points, &cfg.radii, &sampling(cfg, seed))?;
    out.csv(format!("alpha_curve_{label}_seed{seed}.csv"), |w| {
        curve.write_csv(w)
    })?;
    out.csv(format!("alpha_points_{label}_seed{seed}.csv"), |w| {
        use std::io::Write;
        writeln!(w, "point_index,r,alpha_hat,samples,seed")?;
        for (i, row) in curve.per_point.iter().enumerate() {
            for (r, a) in curve.radii.iter().zip(row) {
                writeln!(w, "{i},{r:?},{a:?},{},{seed}", cfg.samples)?;
            }
        }
        Ok(())
    })
}

fn run_alpha_curve(cfg: &ExperimentConfig, data: &LabeledDataset, out: &mut Outputs) -> Result<()> {
    let points = leading_points(data, cfg.points)?;
    match cfg.function {
        CurveFunction::Network => {
            for t in networks(cfg, data, out)? {
                write_curve(out, cfg, &t.label, t.seed, &t.net, &points)?;
            }
        }
        CurveFunction::Sigmoid => {
            let f = Sigmoid { dim: data.dim() };
            for &seed in &cfg.seeds {
                write_curve(out, cfg, "sigmoid", seed, &f, &points)?;
            }
        }
        CurveFunction::Identity => {
            let f = Identity { dim: data.dim() };
            for &seed in &cfg.seeds {
                write_curve(out, cfg, "identity", seed, &f, &points)?;
            }
        }
    }
    Ok(())
}

fn run_audit(cfg: &ExperimentConfig, data: &LabeledDataset, out: &mut Outputs) -> Result<()> {
    let mut rows = Vec::new();
    let views = [
        (Norm::L2, NormScaling::Raw),
        (Norm::L2, NormScaling::PerSqrtDim),
        (Norm::Linf, NormScaling::Raw),
    ];
    let seed = cfg.seeds[0];
    for (norm, scaling) in views {
        let view = data.clone().with_scaling(scaling);
        let tag = format!("{}_{}", norm.name(), scaling.name());
        let m = margin(&view, norm)?;
        rows.push(QuantityRow::pair(format!("margin_{tag}"), &m));
        let stats = pair_stats(&view, norm, cfg.delta, None)?;
        rows.push(QuantityRow::scalar(
            format!("mean_cross_distance_{tag}"),
            stats.mean,
        ));
        rows.push(QuantityRow::scalar(
            format!("cross_pairs_{tag}"),
            stats.pairs as f64,
        ));
        let b = dataset_lipschitz_lower_bound(&view, cfg.delta, norm)?;
        rows.push(QuantityRow {
            quantity: format!("lipschitz_lower_bound_{tag}"),
            value: b.bound,
            arg_i: Some(b.i),
            arg_j: Some(b.j),
            layer: None,
        });
        let distances = if cfg.distances.is_empty() {
            [1.0, 1.5, 2.0, 4.0]
                .iter()
                .map(|k| k * m.value)
                .filter(|d| *d > 0.0)
                .collect()
        } else {
            cfg.distances.clone()
        };
        let mut reports = Vec::new();
        for &d in &distances {
            reports.push(incompatible_pair_fraction(
                &view,
                &cfg.alphas,
                d,
                cfg.delta,
                norm,
                cfg.pair_budget,
                seed,
            )?);
        }
        out.csv(format!("fractions_{tag}.csv"), |w| {
            let mut first = true;
            for r in &reports {
                let mut buf = Vec::new();
                write_fraction_csv(&mut buf, r)?;
                let text = String::from_utf8(buf).expect("ascii");
                let body = if first {
                    &text[..]
                } else {
                    text.split_once('\n').map_or("", |(_, b)| b)
                };
                w.extend_from_slice(body.as_bytes());
                first = false;
            }
            Ok(())
        })?;
    }
    if cfg.network.is_some() {
        for t in networks(cfg, data, out)? {
            let g = gap(&t.net, data, &[], cfg.norm)?;
            rows.push(QuantityRow::pair(
                format!("gap_{}_seed{}", t.label, t.seed),
                &g,
            ));
            if t.net.delta.is_some() {
                rows.push(QuantityRow::scalar(
                    format!("margin_output_{}_seed{}", t.label, t.seed),
                    margin_output(&t.net, cfg.norm)?,
                ));
            }
        }
    }
    out.csv("quantities.csv", |w| write_quantity_csv(w, &rows))
}

fn run_composition(cfg: &ExperimentConfig, data: &LabeledDataset, out: &mut Outputs) -> Result<()> {
    let points = leading_points(data, cfg.points)?;
    let r = cfg.radius.unwrap_or(COMPOSITION_RADIUS);
    let mut text =
        String::from("method,seed,product,end_to_end,hypothesis_holds,bound_satisfied\n");
    for t in networks(cfg, data, out)? {
        let targets = cfg
            .alpha_targets
            .clone()
            .unwrap_or_else(|| vec![1.0; t.net.depth()]);
        let rep = check_compositional_bound(
            &t.net,
            &points,
            r,
            &targets,
            &sampling(cfg, t.seed),
            cfg.tolerance,
        )?;
        out.csv(format!("composition_{}_seed{}.csv", t.label, t.seed), |w| {
            rep.write_csv(w)
        })?;
        text.push_str(&format!(
            "{},{},{:?},{:?},{},{}\n",
            t.label, t.seed, rep.product, rep.end_to_end, rep.hypothesis_holds, rep.bound_satisfied
        ));
    }
    out.add("composition_summary.csv", text.into_bytes());
    Ok(())
}
