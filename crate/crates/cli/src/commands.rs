use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use dnasforge::cost::{reference_layer_table, synth_lut, CostReport, LatencyModel, ReferenceRow};
use dnasforge::engine::{
    evaluate, finish_search, trace_csv, train_architecture, Checkpoint, Evaluation, FinalizeConfig, Search,
    SearchResult, SearchSplits,
};
use dnasforge::spaces::SpaceFile;
use dnasforge::supernet::{ArchitectureSample, StoreSnapshot, SuperNet};
use dnasforge::Rng;

use crate::config::{threads, write_atomic, Artifact, RunConfig};

fn create_dir(out: &Path) -> Result<()> {
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))
}

fn load_arch(path: &Path) -> Result<ArchitectureSample> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    ArchitectureSample::from_json(&text).with_context(|| format!("parsing {}", path.display()))
}

fn load_space(path: &Path) -> Result<SpaceFile> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    SpaceFile::from_json(&text).with_context(|| format!("parsing {}", path.display()))
}

// ---------------------------------------------------------------------------
// analyze

pub struct AnalyzeArgs {
    pub table_2_2: bool,
    pub space: Option<PathBuf>,
    pub config: Option<PathBuf>,
    pub arch: Option<PathBuf>,
    pub lut: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

fn kind_name(r: &ReferenceRow) -> String {
    serde_json::to_value(r.config.kind).ok().and_then(|v| v.as_str().map(str::to_string)).unwrap_or_default()
}

/// The ten reference configurations as a text table.
pub fn render_reference_table(rows: &[ReferenceRow]) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        "{:<6} {:<20} {:>10} {:>14} {:>10} {:>10}",
        "stage", "variant", "params", "MACs", "AI exact", "AI table"
    );
    for r in rows {
        let _ = writeln!(
            s,
            "{:<6} {:<20} {:>10} {:>14} {:>10} {:>10}",
            r.stage,
            kind_name(r),
            r.params,
            r.flops,
            r.arithmetic_intensity,
            r.table_intensity
        );
    }
    s
}

pub fn analyze(a: AnalyzeArgs) -> Result<()> {
    if a.table_2_2 {
        let rows = reference_layer_table();
        print!("{}", render_reference_table(&rows));
        if let Some(out) = &a.out {
            create_dir(out)?;
            let json = serde_json::to_string_pretty(&rows)? + "\n";
            write_atomic(&out.join("reference_table.json"), json.as_bytes())?;
        }
        return Ok(());
    }
    let net = match (&a.space, &a.config) {
        (Some(p), _) => load_space(p)?.space.build(&mut Rng::new(0))?,
        (None, Some(p)) => RunConfig::load(p)?.build_net()?,
        (None, None) => bail!("analyze needs --table-2-2, --space FILE or --config FILE"),
    };
    let indices = match &a.arch {
        Some(p) => net.resolve(&load_arch(p)?)?,
        None => vec![0; net.searchable_count()],
    };
    let lut = a
        .lut
        .as_ref()
        .map(|p| dnasforge::cost::LatencyTable::load(p).with_context(|| format!("loading table {}", p.display())))
        .transpose()?;
    let report: CostReport = net.cost_report(&indices, lut.as_ref())?;
    print!("{}", report.render());
    if let Some(out) = &a.out {
        create_dir(out)?;
        write_atomic(&out.join("report.json"), report.to_json().as_bytes())?;
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// lut-gen

pub fn lut_gen(space: Option<PathBuf>, config: Option<PathBuf>, model: &str, device: &str, out: &Path) -> Result<()> {
    let net = match (&space, &config) {
        (Some(p), _) => load_space(p)?.space.build(&mut Rng::new(0))?,
        (None, Some(p)) => RunConfig::load(p)?.build_net()?,
        (None, None) => bail!("lut-gen needs --space FILE or --config FILE"),
    };
    let model: LatencyModel = model.parse()?;
    let table = synth_lut(net.block_metrics(), model, device)?;
    let missing = table.missing(net.all_blocks().map(|b| &b.key));
    if !missing.is_empty() {
        bail!("generated table misses {} blocks", missing.len());
    }
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    write_atomic(out, table.to_json().as_bytes())?;
    eprintln!("wrote {} entries to {}", table.len(), out.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// search

pub const CHECKPOINT_FILE: &str = "checkpoint.json";

/// Wall-clock information, kept apart from the reproducible outputs.
#[derive(Serialize)]
struct Metadata {
    elapsed_seconds: f64,
    threads: usize,
    resumed_from_epoch: Option<usize>,
}

pub fn search(cfg: RunConfig, out: &Path, resume: bool) -> Result<()> {
    let t = Instant::now();
    let threads = threads()?;
    create_dir(out)?;
    let data = cfg.load_data()?;
    let lut = cfg.load_lut()?;
    let net = cfg.build_net()?;
    let splits = SearchSplits {
        w: &data.w,
        theta: &data.theta,
    };
    let ckpt_path = out.join(CHECKPOINT_FILE);
    let mut resumed_from = None;
    let mut search = if resume && ckpt_path.exists() {
        let ckpt: Artifact<Checkpoint> = Artifact::load(&ckpt_path)?;
        let now = cfg.hash();
        if ckpt.run_config_hash != now {
            bail!(
                "{} was written by run config {}, but the current config hashes to {now}; refusing to resume",
                ckpt_path.display(),
                ckpt.run_config_hash
            );
        }
        resumed_from = Some(ckpt.payload.epoch);
        Search::resume(net, splits, cfg.search.clone(), lut.as_ref(), &ckpt.payload)?
    } else {
        Search::new(net, splits, cfg.search.clone(), lut.as_ref())?
    };
    while !search.is_done() {
        let row = search.step_epoch()?;
        eprintln!(
            "epoch {:>3}  tau {:.4}  ce {:.4}  expected cost {:.6e}  loss {:.4}",
            row.epoch, row.tau, row.ce, row.expected_cost, row.loss
        );
        Artifact::new(&cfg, search.checkpoint()).save(&ckpt_path)?;
    }
    let (result, _) = finish_search(search, &data.test, lut.as_ref(), threads)?;
    write_search_outputs(&cfg, &result, out)?;
    let meta = Metadata {
        elapsed_seconds: t.elapsed().as_secs_f64(),
        threads,
        resumed_from_epoch: resumed_from,
    };
    write_atomic(&out.join("metadata.json"), (serde_json::to_string_pretty(&meta)? + "\n").as_bytes())?;
    for s in &result.samples {
        eprintln!("{:?}  accuracy {:.4}  size {} bits", s.arch.indices(), s.accuracy, s.size_bits);
    }
    Ok(())
}

fn write_search_outputs(cfg: &RunConfig, result: &SearchResult, out: &Path) -> Result<()> {
    write_atomic(&out.join("trace.csv"), trace_csv(&result.trace).as_bytes())?;
    Artifact::new(cfg, result.clone()).save(&out.join("result.json"))?;
    let archs = out.join("archs");
    create_dir(&archs)?;
    for (i, s) in result.samples.iter().enumerate() {
        write_atomic(&archs.join(format!("sample_{i:02}.json")), s.arch.to_json().as_bytes())?;
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// sample

pub fn sample(checkpoint: &Path, seed: Option<u64>, count: usize, out: &Path) -> Result<()> {
    let ckpt: Artifact<Checkpoint> = Artifact::load(checkpoint)?;
    let cfg = ckpt.run_config;
    let mut net = cfg.build_net()?;
    net.set_theta(&ckpt.payload.theta)?;
    let seed = seed.unwrap_or(cfg.seed);
    let mut rng = Rng::new(seed);
    create_dir(out)?;
    let mut archs = vec![net.argmax_arch(seed)];
    archs.extend((0..count).map(|_| net.sample_arch(&mut rng)));
    for (i, a) in archs.iter().enumerate() {
        let name = if i == 0 { "argmax.json".to_string() } else { format!("sample_{:02}.json", i - 1) };
        write_atomic(&out.join(&name), a.to_json().as_bytes())?;
        eprintln!("{name}: {:?}", a.indices());
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// train / eval

/// Trained weights of one architecture.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Model {
    pub arch: ArchitectureSample,
    pub store: StoreSnapshot,
    pub train_losses: Vec<f64>,
}

pub fn train(cfg: RunConfig, arch: &Path, out: &Path) -> Result<()> {
    let arch = load_arch(arch)?;
    let data = cfg.load_data()?;
    let train = data.train()?;
    let mut rng = Rng::new(cfg.seed);
    let mut net = cfg.build_net()?.reinitialized(&mut rng);
    let idx = net.resolve(&arch)?;
    let recipe = FinalizeConfig::from(&cfg.search);
    let losses = train_architecture(&mut net, &idx, &train, recipe.epochs, recipe.batch_size, recipe.sgd, &mut rng)?;
    create_dir(out)?;
    let model = Model {
        arch,
        store: net.store().snapshot(),
        train_losses: losses.clone(),
    };
    Artifact::new(&cfg, model).save(&out.join("model.json"))?;
    eprintln!("trained {} epochs, final loss {:.6}", losses.len(), losses.last().copied().unwrap_or(f64::NAN));
    Ok(())
}

/// Rebuilds the trained network described by a model artifact.
pub fn load_model(path: &Path) -> Result<(RunConfig, SuperNet, Vec<usize>, Model)> {
    let a: Artifact<Model> = Artifact::load(path)?;
    let mut net = a.run_config.build_net()?;
    net.store_mut().restore(&a.payload.store)?;
    let idx = net.resolve(&a.payload.arch)?;
    Ok((a.run_config, net, idx, a.payload))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub arch: Vec<usize>,
    pub evaluation: Evaluation,
    pub test_images: usize,
    pub size_bits: f64,
    pub flop_bits: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub latency_us: Option<f64>,
}

pub fn eval(model: &Path, lut: Option<PathBuf>, out: Option<&Path>) -> Result<EvalReport> {
    let (cfg, net, idx, _) = load_model(model)?;
    let data = cfg.load_data()?;
    let evaluation = evaluate(&net, &idx, &data.test, cfg.search.batch_size)?;
    let lut = match lut {
        Some(p) => Some(dnasforge::cost::LatencyTable::load(&p).with_context(|| format!("loading table {}", p.display()))?),
        None => cfg.load_lut()?,
    };
    let report = EvalReport {
        evaluation,
        test_images: data.test.len(),
        size_bits: net.size_coefficients().hard(&idx)?,
        flop_bits: net.flop_coefficients().hard(&idx)?,
        latency_us: lut.map(|t| net.net_latency(&idx, &t)).transpose()?,
        arch: idx,
    };
    let json = serde_json::to_string_pretty(&report)? + "\n";
    print!("{json}");
    if let Some(out) = out {
        create_dir(out)?;
        write_atomic(&out.join("eval.json"), json.as_bytes())?;
    }
    Ok(report)
}

/// Config for commands that need one, with flag overrides applied.
pub fn resolved_config(path: Option<&Path>, seed: Option<u64>, lut: Option<PathBuf>) -> Result<RunConfig> {
    let Some(path) = path else {
        bail!("this command needs --config FILE");
    };
    RunConfig::load(path)?.resolve(seed, lut)
}
