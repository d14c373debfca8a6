//! `psi`: generate data, train, evaluate and explain probabilistic Shapley models.

mod pipeline;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use psi_core::checkpoint::Checkpoint;
use psi_core::config::{config_hash, RunConfig};
use psi_core::csvio::{feature_header, load_dataset, read_table, write_dataset, write_latent, write_table};
use psi_core::datagen::{gen_logit, gen_synth, DEFAULT_N};
use psi_core::elbo::Task;
use psi_core::eval::{attribute, attribution_prf, j_divergence_protocol, pr_auc, predict_mean, rmse, JDivergenceConfig};
use psi_core::menn::PsiModel;
use psi_core::nncore::Matrix;
use psi_core::shapley::model_shapley;
use psi_core::traineng::fit_with_observer;
use rayon::prelude::*;
use serde::Serialize;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

#[derive(Parser)]
#[command(name = "psi", version, about = "Probabilistic Shapley inference")]
struct Cli {
    /// Seed overriding the configured one.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output file (datagen, eval, attribute, shapley) or directory (train).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Overwrite existing outputs.
    #[arg(long, global = true)]
    force: bool,
    /// Worker threads for evaluation commands.
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic dataset and its latent attributions as CSV.
    Datagen {
        /// 1..=5 for the regression DGPs, 0 for the logit classification DGP.
        #[arg(long)]
        synth: u8,
        #[arg(long, default_value_t = DEFAULT_N)]
        n: usize,
    },
    /// Train from a TOML run config; writes checkpoint.json, trace.csv and heldout.csv.
    Train { config: PathBuf },
    /// Compute metrics of a checkpoint on a dataset.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Comma-separated: rmse, pr_auc, j_divergence, prf.
        #[arg(long, value_delimiter = ',')]
        metrics: Vec<String>,
        /// Binary ground-truth masks (header m1..mD) for prf.
        #[arg(long)]
        masks: Option<PathBuf>,
        /// Credible level used by prf.
        #[arg(long, default_value_t = 0.0, allow_negative_numbers = true)]
        z: f64,
        /// Rows drawn per coalition by j_divergence.
        #[arg(long, default_value_t = 4096)]
        j_samples: usize,
    },
    /// Per-instance probabilistic attributions f_d + z·σ_d.
    Attribute {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "0,2", allow_negative_numbers = true)]
        z: Vec<f64>,
    },
    /// Exact Shapley values of the additive output by coalition enumeration.
    Shapley {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Row indices (`0,4,7`) or a half-open range (`0..100`); default all rows.
        #[arg(long)]
        rows: Option<String>,
    },
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    if cli.threads == 0 {
        bail!("--threads must be at least 1");
    }
    rayon::ThreadPoolBuilder::new().num_threads(cli.threads).build_global()?;
    match &cli.command {
        Command::Datagen { synth, n } => datagen(&cli, *synth, *n),
        Command::Train { config } => train(&cli, config),
        Command::Eval { checkpoint, data, metrics, masks, z, j_samples } => {
            eval(&cli, checkpoint, data, metrics, masks.as_deref(), *z, *j_samples)
        }
        Command::Attribute { checkpoint, data, z } => attribute_cmd(&cli, checkpoint, data, z),
        Command::Shapley { checkpoint, data, rows } => shapley_cmd(&cli, checkpoint, data, rows.as_deref()),
    }
}

fn header_line(command: &str, hash: &str, seed: u64) -> String {
    format!("psi {command} config_hash={hash} seed={seed}")
}

fn check_writable(paths: &[&Path], force: bool) -> Result<()> {
    for p in paths {
        if p.exists() && !force {
            bail!("{} exists; pass --force to overwrite", p.display());
        }
    }
    Ok(())
}

/// Writes via a sibling temporary file so a failed write leaves no partial output.
fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("partial");
    fs::write(&tmp, bytes).with_context(|| format!("writing {}", tmp.display()))?;
    fs::rename(&tmp, path)?;
    Ok(())
}

fn latent_path(data: &Path) -> PathBuf {
    let stem = data.file_stem().and_then(|s| s.to_str()).unwrap_or("data");
    data.with_file_name(format!("{stem}.latent.csv"))
}

#[derive(Serialize)]
struct DatagenParams {
    synth: u8,
    n: usize,
    seed: u64,
}

fn datagen(cli: &Cli, synth: u8, n: usize) -> Result<()> {
    let seed = cli.seed.unwrap_or(0);
    let data = match synth {
        0 => gen_logit(n, seed)?,
        k => gen_synth(k, n, seed)?,
    };
    let out = cli.out.clone().unwrap_or_else(|| PathBuf::from(format!("synth{synth}.csv")));
    let latent_out = latent_path(&out);
    check_writable(&[&out, &latent_out], cli.force)?;
    let comments = vec![header_line("datagen", &config_hash(&DatagenParams { synth, n, seed }), seed)];
    let mut buf = Vec::new();
    write_dataset(&mut buf, &data, &comments)?;
    let mut latent = Vec::new();
    write_latent(&mut latent, &data.latent.as_ref().expect("synthetic data has a latent record").ssv, &comments)?;
    write_atomic(&out, &buf)?;
    write_atomic(&latent_out, &latent)?;
    println!("wrote {} rows to {} and {}", data.len(), out.display(), latent_out.display());
    Ok(())
}

fn train(cli: &Cli, config_path: &Path) -> Result<()> {
    let mut config = RunConfig::load(config_path).with_context(|| format!("loading {}", config_path.display()))?;
    if let Some(seed) = cli.seed {
        config.train.seed = Some(seed);
    }
    let hash = config.hash();
    let dir = cli
        .out
        .clone()
        .or_else(|| config.output_dir.clone())
        .unwrap_or_else(|| PathBuf::from("."));
    let (ck_path, trace_path, heldout_path) = (dir.join("checkpoint.json"), dir.join("trace.csv"), dir.join("heldout.csv"));
    check_writable(&[&ck_path, &trace_path, &heldout_path], cli.force)?;

    let data = pipeline::load_source(&config, config_path)?;
    let split = pipeline::split(&config, &data, config.data.seed.unwrap_or(0))?;
    let d = data.n_features();
    let train_cfg = config.train_config(d)?;
    let mut model = PsiModel::new(config.model_config(d))?;
    eprintln!(
        "training {} rows, {} features, {} parameters, config {hash}",
        split.train.len(),
        d,
        model.store().num_scalars()
    );
    let start = Instant::now();
    let trace = fit_with_observer(&mut model, &split.train.x, &split.train.y, &train_cfg, |r| {
        eprintln!(
            "epoch {:>4}  loss {:.6}  max|mean_fd| {:.4}  {:.1}s",
            r.epoch,
            r.loss,
            r.mean_fd_linf(),
            start.elapsed().as_secs_f64()
        );
    })?;

    let comments = vec![header_line("train", &hash, train_cfg.seed)];
    let ck = Checkpoint::from_model(&model, train_cfg.task, Some(split.standardizer), train_cfg.seed, hash.clone());
    let mut header = vec!["epoch".to_string(), "loss".to_string()];
    header.extend(feature_header(d, "mean_f"));
    let rows = Matrix::from_fn(trace.epochs.len(), d + 2, |i, j| {
        let e = &trace.epochs[i];
        match j {
            0 => e.epoch as f64,
            1 => e.loss,
            _ => e.mean_fd[j - 2],
        }
    });
    let mut trace_buf = Vec::new();
    write_table(&mut trace_buf, &comments, &header, &rows)?;
    let mut heldout_buf = Vec::new();
    write_dataset(&mut heldout_buf, &split.heldout, &comments)?;

    fs::create_dir_all(&dir)?;
    write_atomic(&ck_path, (ck.to_json()? + "\n").as_bytes())?;
    write_atomic(&trace_path, &trace_buf)?;
    write_atomic(&heldout_path, &heldout_buf)?;
    println!("wrote {}, {} and {}", ck_path.display(), trace_path.display(), heldout_path.display());
    Ok(())
}

struct Loaded {
    ck: Checkpoint,
    model: PsiModel,
    /// Standardized inputs and targets.
    x: Matrix,
    y: Vec<f64>,
    raw_y: Vec<f64>,
    y_scale: f64,
}

fn load_for_eval(checkpoint: &Path, data: &Path) -> Result<Loaded> {
    let ck = Checkpoint::load(checkpoint).with_context(|| format!("loading {}", checkpoint.display()))?;
    let model = ck.to_model()?;
    let ds = load_dataset(data, ck.task).with_context(|| format!("reading {}", data.display()))?;
    if ds.n_features() != model.n_features() {
        bail!("dataset has {} features, checkpoint expects {}", ds.n_features(), model.n_features());
    }
    let (x, y, y_scale) = match &ck.standardizer {
        Some(st) => (st.apply_x(&ds.x), ds.y.iter().map(|&v| st.apply_y(v)).collect(), st.y_scale()),
        None => (ds.x.clone(), ds.y.clone(), 1.0),
    };
    Ok(Loaded { ck, model, x, y, raw_y: ds.y, y_scale })
}

fn eval(
    cli: &Cli,
    checkpoint: &Path,
    data: &Path,
    metrics: &[String],
    masks: Option<&Path>,
    z: f64,
    j_samples: usize,
) -> Result<()> {
    let l = load_for_eval(checkpoint, data)?;
    let out = cli.out.clone().unwrap_or_else(|| PathBuf::from("metrics.csv"));
    check_writable(&[&out], cli.force)?;
    let metrics: Vec<String> = if metrics.is_empty() {
        vec![match l.ck.task {
            Task::Regression => "rmse".into(),
            Task::Classification => "pr_auc".into(),
        }]
    } else {
        metrics.to_vec()
    };
    let seed = cli.seed.unwrap_or(0);
    let mut rows = Vec::new();
    for m in &metrics {
        let value = match (m.as_str(), l.ck.task) {
            ("rmse", Task::Regression) => {
                let st = l.ck.standardizer.as_ref();
                let pred: Vec<f64> = predict_mean(&l.model, &l.x)?
                    .into_iter()
                    .map(|v| st.map_or(v, |s| s.invert_y(v)))
                    .collect();
                rmse(&pred, &l.raw_y)?
            }
            ("pr_auc", Task::Classification) => pr_auc(&predict_mean(&l.model, &l.x)?, &l.y)?,
            ("rmse", Task::Classification) | ("pr_auc", Task::Regression) => {
                bail!("metric `{m}` does not apply to a {:?} checkpoint", l.ck.task)
            }
            ("j_divergence", _) => {
                let cfg = JDivergenceConfig { sample_size: j_samples, seed, ..JDivergenceConfig::default() };
                j_divergence_protocol(&l.model, &l.x, &l.y, &cfg)?
            }
            ("prf", _) => {
                let path = masks.context("metric `prf` needs --masks")?;
                let (_, mask) = read_table(fs::File::open(path).with_context(|| format!("opening {}", path.display()))?)?;
                let report = attribute(&l.model, &l.x, &[z])?;
                let prf = attribution_prf(&report, &mask, z)?;
                rows.push(("precision".to_string(), prf.precision));
                rows.push(("recall".to_string(), prf.recall));
                prf.f
            }
            (other, _) => bail!("unknown metric `{other}` (expected rmse, pr_auc, j_divergence or prf)"),
        };
        rows.push((if m == "prf" { "f".into() } else { m.clone() }, value));
    }
    let mut text = format!("# {}\nmetric,value\n", header_line("eval", &l.ck.config_hash, seed));
    for (name, v) in &rows {
        text.push_str(&format!("{name},{v}\n"));
        println!("{name} {v}");
    }
    write_atomic(&out, text.as_bytes())
}

fn attribute_cmd(cli: &Cli, checkpoint: &Path, data: &Path, z_list: &[f64]) -> Result<()> {
    let l = load_for_eval(checkpoint, data)?;
    let out = cli.out.clone().unwrap_or_else(|| PathBuf::from("attributions.csv"));
    check_writable(&[&out], cli.force)?;
    let report = attribute(&l.model, &l.x, z_list)?;
    let d = l.model.n_features();
    let s = l.y_scale;
    let mut rows = Vec::new();
    for (i, inst) in report.instances.iter().enumerate() {
        for (k, &z) in z_list.iter().enumerate() {
            for j in 0..d {
                rows.push([
                    i as f64,
                    (j + 1) as f64,
                    z,
                    s * inst.f[j],
                    s * inst.sigma[j],
                    s * inst.att[k][j],
                    inst.att_std[k][j],
                    inst.rank[k][j] as f64,
                ]);
            }
        }
    }
    let header: Vec<String> = ["instance", "feature", "z", "f", "sigma", "att", "att_std", "rank"].map(String::from).to_vec();
    let table = Matrix::from_fn(rows.len(), header.len(), |i, j| rows[i][j]);
    let mut buf = Vec::new();
    write_table(&mut buf, &[header_line("attribute", &l.ck.config_hash, l.ck.seed)], &header, &table)?;
    write_atomic(&out, &buf)?;
    println!("wrote {} attribution rows to {}", rows.len(), out.display());
    Ok(())
}

fn parse_rows(spec: Option<&str>, n: usize) -> Result<Vec<usize>> {
    let rows: Vec<usize> = match spec {
        None => (0..n).collect(),
        Some(s) if s.contains("..") => {
            let (a, b) = s.split_once("..").expect("checked");
            let a: usize = if a.is_empty() { 0 } else { a.parse().context("row range start")? };
            let b: usize = if b.is_empty() { n } else { b.parse().context("row range end")? };
            (a..b).collect()
        }
        Some(s) => s
            .split(',')
            .map(|t| t.trim().parse::<usize>().with_context(|| format!("row index `{t}`")))
            .collect::<Result<_>>()?,
    };
    if let Some(&bad) = rows.iter().find(|&&r| r >= n) {
        bail!("row {bad} out of range for {n} rows");
    }
    Ok(rows)
}

fn shapley_cmd(cli: &Cli, checkpoint: &Path, data: &Path, rows: Option<&str>) -> Result<()> {
    let l = load_for_eval(checkpoint, data)?;
    let out = cli.out.clone().unwrap_or_else(|| PathBuf::from("shapley.csv"));
    check_writable(&[&out], cli.force)?;
    let rows = parse_rows(rows, l.x.rows())?;
    let d = l.model.n_features();
    let s = l.y_scale;
    let results: Vec<Result<(Vec<f64>, Vec<f64>, f64)>> = rows
        .par_iter()
        .map(|&r| {
            let x = l.x.row(r);
            let sh = model_shapley(&l.model, x)?;
            let f = l.model.predict_full(&Matrix::from_vec(1, d, x.to_vec())?)?.f.row(0).to_vec();
            Ok((sh.phi.clone(), f, sh.efficiency_residual()))
        })
        .collect();
    let mut table = Vec::new();
    let mut gap_sum = 0.0;
    let mut worst_residual: f64 = 0.0;
    for (&r, res) in rows.iter().zip(results) {
        let (phi, f, resid) = res?;
        worst_residual = worst_residual.max(resid.abs() * s);
        for j in 0..d {
            gap_sum += (phi[j] - f[j]).abs() * s;
            table.push([r as f64, (j + 1) as f64, s * phi[j], s * f[j], s * (phi[j] - f[j]), s * resid]);
        }
    }
    let header: Vec<String> = ["instance", "feature", "phi", "f", "gap", "efficiency_residual"].map(String::from).to_vec();
    let m = Matrix::from_fn(table.len(), header.len(), |i, j| table[i][j]);
    let mut buf = Vec::new();
    write_table(&mut buf, &[header_line("shapley", &l.ck.config_hash, l.ck.seed)], &header, &m)?;
    write_atomic(&out, &buf)?;
    println!(
        "rows {}  mean |phi - f| {}  max |efficiency residual| {}",
        rows.len(),
        gap_sum / table.len().max(1) as f64,
        worst_residual
    );
    Ok(())
}
