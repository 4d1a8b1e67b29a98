use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use nalgebra::Matrix3;

use xtal::checkpoint::Checkpoint;
use xtal::config::{env_entries, RunConfig};
use xtal::crystal::{lattice_from_latent, lattice_parameters, latent_from_lattice, min_image, mod1, wrap, Crystal};
use xtal::dataset::{load_corpus, read_jsonl, Corpus};
use xtal::elements::{mp20_elements, symbol, z_from_symbol};
use xtal::evaluation::{csp_metrics, evaluate, read_stability, uniqueness, un_rate, MatchTolerances};
use xtal::model::Model;
use xtal::sampler::{chain_rng, sample_csp, sample_dng, schedule_csv, SamplerConfig};
use xtal::tokenizer::TokenTable;
use xtal::train::{denoise_metrics, state_from_crystal, Trainer};

const VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Parser)]
#[command(name = "xtal", version, about = "Crystal diffusion toolkit")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Build a token table and check that every element decodes to itself.
    BuildTokens {
        /// Atomic numbers or symbols, separated by whitespace or commas (default: the MP-20 set).
        #[arg(long)]
        elements: Option<PathBuf>,
        #[arg(long, default_value_t = 16)]
        dh: usize,
        #[arg(long)]
        no_pca: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train on a JSON-lines corpus and write a checkpoint plus a CSV metric log.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        run: RunArgs,
        /// CSV metric log (default: <out>.log.csv).
        #[arg(long)]
        log: Option<PathBuf>,
        /// Reference set for the logged novelty rate.
        #[arg(long)]
        reference: Option<PathBuf>,
        /// Token table file (default: built from the configuration).
        #[arg(long)]
        tokens: Option<PathBuf>,
    },
    /// Draw crystals from a checkpoint.
    Sample {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, default_value_t = 100)]
        n: usize,
        #[arg(long)]
        out: PathBuf,
        /// JSON lines with `atomic_numbers`; one prediction per line, repeated `n` times each.
        #[arg(long)]
        csp: Option<PathBuf>,
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        aa_coords: Option<f64>,
        #[arg(long)]
        aa_types: Option<f64>,
        #[arg(long)]
        aa_lattice: Option<f64>,
        #[arg(long)]
        aa_cap: Option<f64>,
    },
    /// Validity, uniqueness, novelty and distribution metrics for generated crystals.
    Eval {
        #[arg(long)]
        generated: PathBuf,
        #[arg(long)]
        reference: PathBuf,
        /// CSV of `id,e_above_hull` for the generated crystals.
        #[arg(long)]
        stability: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Match rate and RMSD of predicted structures against ground truth (line by line).
    CspEval {
        #[arg(long)]
        predictions: PathBuf,
        #[arg(long)]
        truths: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Corpus inspection.
    Dataset {
        #[command(subcommand)]
        cmd: DatasetCmd,
    },
    /// Geometry utilities.
    Geom {
        #[command(subcommand)]
        cmd: GeomCmd,
    },
    /// Noise schedule and anti-annealing factors.
    Schedule {
        /// Print the table as CSV.
        #[arg(long)]
        dump: bool,
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        aa_coords: Option<f64>,
        #[arg(long)]
        aa_types: Option<f64>,
        #[arg(long)]
        aa_lattice: Option<f64>,
        #[arg(long)]
        aa_cap: Option<f64>,
    },
}

#[derive(Subcommand)]
enum DatasetCmd {
    /// Atom-count histogram and element inventory.
    Stats {
        file: PathBuf,
        #[arg(long, default_value_t = xtal::dataset::DEFAULT_MAX_ATOMS)]
        max_atoms: usize,
    },
    /// Write the built-in 16-crystal toy corpus.
    Toy {
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Subcommand)]
enum GeomCmd {
    /// Minimum image of `f_i - f_j`.
    MinImage {
        #[arg(num_args = 6, allow_negative_numbers = true)]
        coords: Vec<f64>,
        #[command(flatten)]
        lattice: LatticeArg,
    },
    /// Wrap into `[-1/2, 1/2)`.
    Wrap {
        #[arg(allow_negative_numbers = true)]
        values: Vec<f64>,
    },
    /// Reduce into `[0, 1)`.
    Mod1 {
        #[arg(allow_negative_numbers = true)]
        values: Vec<f64>,
    },
    /// Lattice → latent → lattice, printing the largest parameter error.
    LatentRoundtrip {
        #[command(flatten)]
        lattice: LatticeArg,
    },
}

#[derive(Args)]
#[group(required = true, multiple = false)]
struct LatticeArg {
    /// Cubic cell edge.
    #[arg(long)]
    cubic: Option<f64>,
    /// Nine row-major entries.
    #[arg(long, num_args = 9, allow_negative_numbers = true)]
    lattice: Option<Vec<f64>>,
}

impl LatticeArg {
    fn matrix(&self) -> Matrix3<f64> {
        match (&self.cubic, &self.lattice) {
            (Some(a), _) => Matrix3::from_diagonal_element(*a),
            (_, Some(v)) => Matrix3::from_row_slice(v),
            _ => unreachable!("clap enforces one of the two"),
        }
    }
}

#[derive(Args, Clone, Default)]
struct RunArgs {
    /// Flat `key = value` configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    steps: Option<usize>,
    /// Extra `key=value` overrides.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Debug)]
struct Failure {
    code: u8,
    msg: String,
}

impl Failure {
    fn usage(msg: impl Into<String>) -> Self {
        Self { code: 2, msg: msg.into() }
    }
}

impl From<xtal::Error> for Failure {
    fn from(e: xtal::Error) -> Self {
        use xtal::Error::*;
        let code = match e {
            Parse { .. } | Config(_) | InvalidInput(_) | UnsupportedElement(_) | Json(_) | EmptyCorpus => 2,
            _ => 1,
        };
        Self { code, msg: e.to_string() }
    }
}

type Res<T> = std::result::Result<T, Failure>;

fn read_text(path: &Path) -> Res<String> {
    std::fs::read_to_string(path).map_err(|e| Failure::usage(format!("{}: {e}", path.display())))
}

fn with_path<T>(path: &Path, r: xtal::Result<T>) -> Res<T> {
    r.map_err(|e| {
        let f = Failure::from(e);
        Failure { code: f.code, msg: format!("{}: {}", path.display(), f.msg) }
    })
}

fn write_file(path: &Path, text: &str) -> Res<()> {
    std::fs::write(path, text).map_err(|e| Failure { code: 1, msg: format!("{}: {e}", path.display()) })
}

fn resolve(run: &RunArgs, mut extra: Vec<(String, String)>) -> Res<RunConfig> {
    if let Some(p) = &run.config {
        if !p.exists() {
            return Err(Failure::usage(format!("{}: config file not found", p.display())));
        }
    }
    let mut flags = Vec::new();
    if let Some(s) = run.seed {
        flags.push(("seed".to_string(), s.to_string()));
    }
    for kv in &run.set {
        let (k, v) = kv.split_once('=').ok_or_else(|| Failure::usage(format!("--set expects key=value, got {kv:?}")))?;
        flags.push((k.trim().to_string(), v.trim().to_string()));
    }
    flags.append(&mut extra);
    let env = env_entries(std::env::vars());
    let cfg = RunConfig::resolve(run.config.as_deref(), &env, &flags)?;
    log::info!("resolved config (hash {}, seed {}):\n{}", cfg.hash(), cfg.seed, cfg.to_text());
    Ok(cfg)
}

fn aa_flags(coords: Option<f64>, types: Option<f64>, lattice: Option<f64>, cap: Option<f64>) -> Vec<(String, String)> {
    [("aa_coords", coords), ("aa_types", types), ("aa_lattice", lattice), ("aa_cap", cap)]
        .into_iter()
        .filter_map(|(k, v)| v.map(|v| (k.to_string(), v.to_string())))
        .collect()
}

fn header(hash: &str) -> String {
    format!("# xtal {VERSION} config {hash}\n")
}

fn write_crystals(path: &Path, crystals: &[Crystal], hash: &str) -> Res<()> {
    let mut s = header(hash);
    for c in crystals {
        s.push_str(&c.to_json_line());
        s.push('\n');
    }
    write_file(path, &s)
}

/// Shortest decimal form, rounding away float noise past ten places.
fn num(v: f64) -> String {
    let r = (v * 1e10).round() / 1e10;
    let r = if r == 0.0 { 0.0 } else { r };
    format!("{r}")
}

fn parse_elements(text: &str) -> Res<Vec<u8>> {
    let mut out = Vec::new();
    for tok in text.split(|c: char| c.is_whitespace() || c == ',').filter(|t| !t.is_empty()) {
        let z = match tok.parse::<u8>() {
            Ok(z) => z,
            Err(_) => z_from_symbol(tok).ok_or_else(|| Failure::usage(format!("unknown element {tok:?}")))?,
        };
        out.push(z);
    }
    out.sort_unstable();
    out.dedup();
    Ok(out)
}

fn build_tokens(elements: Option<PathBuf>, dh: usize, no_pca: bool, out: PathBuf) -> Res<()> {
    let set = match &elements {
        Some(p) => parse_elements(&read_text(p)?)?,
        None => mp20_elements(),
    };
    let table = TokenTable::build(&set, dh, !no_pca)?;
    let ok = set.iter().filter(|&&z| table.prototype(z).ok().and_then(|h| table.decode(h).ok()) == Some(z)).count();
    with_path(&out, table.save(&out))?;
    println!("{} elements, d_H = {}, {}", set.len(), table.token_dim(), if no_pca { "raw" } else { "pca" });
    println!("round-trip {ok}/{}", set.len());
    if ok != set.len() {
        return Err(Failure { code: 1, msg: "some elements do not decode to themselves".into() });
    }
    Ok(())
}

fn train(data: PathBuf, out: PathBuf, run: RunArgs, log_path: Option<PathBuf>, reference: Option<PathBuf>, tokens: Option<PathBuf>) -> Res<()> {
    let extra = run.steps.map(|s| vec![("steps".to_string(), s.to_string())]).unwrap_or_default();
    let cfg = resolve(&run, extra)?;
    if !data.exists() {
        return Err(Failure::usage(format!("{}: data file not found", data.display())));
    }
    let corpus = with_path(&data, load_corpus(&data, cfg.max_atoms))?;
    let table = match &tokens {
        Some(p) => with_path(p, TokenTable::load(p))?,
        None => TokenTable::build(&mp20_elements(), cfg.token_dim, cfg.use_pca)?,
    };
    if table.token_dim() != cfg.model.d_h {
        return Err(Failure::usage("token table width differs from token_dim"));
    }
    let reference = match &reference {
        Some(p) => Some(with_path(p, read_jsonl(p))?),
        None => None,
    };
    let states = corpus.crystals.iter().map(|c| state_from_crystal(c, &table)).collect::<xtal::Result<Vec<_>>>()?;
    let zs: Vec<Vec<u8>> = corpus.crystals.iter().map(|c| c.atomic_numbers.clone()).collect();
    let model = Model::new(cfg.model.clone(), cfg.edm, cfg.seed)?;
    let mut trainer = Trainer::new(model, states.clone(), cfg.train.clone())?;
    let hash = cfg.hash();
    let log_path = log_path.unwrap_or_else(|| PathBuf::from(format!("{}.log.csv", out.display())));
    let mut csv = header(&hash);
    csv.push_str("step,loss,grad_norm,lr,coord_rmse,decode_accuracy,lattice_rmse,sample_valid,sample_unique,sample_un\n");
    let sample_cfg = SamplerConfig { steps: cfg.log_sample_steps.max(1), ..cfg.sampler };
    let tol = MatchTolerances::default();
    let mut acc = (0.0, 0.0, 0usize);
    let t0 = std::time::Instant::now();
    for _ in 0..cfg.train.steps {
        let s = trainer.step().map_err(|e| Failure { code: 1, msg: format!("training aborted at step {}: {e}", trainer.step) })?;
        acc = (acc.0 + s.loss, acc.1 + s.grad_norm, acc.2 + 1);
        let done = s.step + 1;
        if cfg.log_every > 0 && (done % cfg.log_every == 0 || done == cfg.train.steps) {
            let ema = trainer.ema_model();
            let m = denoise_metrics(&ema, &states, &zs, &table, 0.1, cfg.seed)?;
            let mut samples = Vec::new();
            for i in 0..cfg.log_samples {
                let mut rng = chain_rng(cfg.seed ^ done as u64, i as u64);
                let n = corpus.sample_atom_count(&mut rng);
                if let Ok(c) = sample_dng(&ema, &table, n, &sample_cfg, &mut rng) {
                    samples.push(c);
                }
            }
            let valid = samples.iter().filter(|c| xtal::evaluation::structural_validity(c).is_ok()).count();
            let denom = cfg.log_samples.max(1) as f64;
            let unique = uniqueness(&samples, &tol).1.len() as f64 / denom;
            let un = reference.as_ref().map(|r| un_rate(&samples, r, &tol).2.len() as f64 / denom);
            let _ = writeln!(
                csv,
                "{done},{},{},{},{},{},{},{},{},{}",
                acc.0 / acc.2 as f64,
                acc.1 / acc.2 as f64,
                s.lr,
                m.coord_rmse,
                m.decode_accuracy,
                m.lattice_rmse,
                valid as f64 / denom,
                unique,
                un.map(|u| u.to_string()).unwrap_or_default()
            );
            log::info!("step {done} loss {:.4} coord_rmse {:.4} decode {:.3} ({:.0}s)", acc.0 / acc.2 as f64, m.coord_rmse, m.decode_accuracy, t0.elapsed().as_secs_f64());
            acc = (0.0, 0.0, 0);
        }
    }
    let ck = Checkpoint::new(cfg, trainer.step, trainer.model.clone(), trainer.ema.clone(), trainer.opt.clone(), table, corpus.atom_count_hist.clone());
    with_path(&out, ck.save(&out))?;
    write_file(&log_path, &csv)?;
    println!("wrote {} after {} steps", out.display(), trainer.step);
    Ok(())
}

fn compositions(path: &Path) -> Res<Vec<Vec<u8>>> {
    let text = read_text(path)?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let bad = |m: String| Failure::usage(format!("{}:{}: {m}", path.display(), i + 1));
        let v: serde_json::Value = serde_json::from_str(line).map_err(|e| bad(e.to_string()))?;
        let zs = v
            .get("atomic_numbers")
            .and_then(|a| a.as_array())
            .ok_or_else(|| bad("missing atomic_numbers".into()))?
            .iter()
            .map(|z| z.as_u64().and_then(|z| u8::try_from(z).ok()).ok_or_else(|| bad(format!("bad atomic number {z}"))))
            .collect::<Res<Vec<u8>>>()?;
        out.push(zs);
    }
    Ok(out)
}

#[allow(clippy::too_many_arguments)]
fn sample(ckpt: PathBuf, n: usize, out: PathBuf, csp: Option<PathBuf>, run: RunArgs, aa: Vec<(String, String)>) -> Res<()> {
    if !ckpt.exists() {
        return Err(Failure::usage(format!("{}: checkpoint not found", ckpt.display())));
    }
    let ck = with_path(&ckpt, Checkpoint::load(&ckpt))?;
    let mut extra = aa;
    if let Some(s) = run.steps {
        extra.push(("sample_steps".into(), s.to_string()));
    }
    // the checkpoint's config is the base layer for sampling settings
    let mut cfg = ck.config.clone();
    if let Some(p) = &run.config {
        for (k, v) in xtal::config::parse_flat(&read_text(p)?)? {
            cfg.set(&k, &v)?;
        }
    }
    for (k, v) in env_entries(std::env::vars()).iter().chain(&extra) {
        cfg.set(k, v)?;
    }
    for kv in &run.set {
        let (k, v) = kv.split_once('=').ok_or_else(|| Failure::usage(format!("--set expects key=value, got {kv:?}")))?;
        cfg.set(k.trim(), v.trim())?;
    }
    if let Some(s) = run.seed {
        cfg.set("seed", &s.to_string())?;
    }
    let seed = cfg.seed;
    cfg.validate()?;
    log::info!("resolved config (hash {}, seed {}):\n{}", cfg.hash(), cfg.seed, cfg.to_text());
    let model = ck.ema_model();
    let corpus_hist = Corpus {
        crystals: Vec::new(),
        atom_count_hist: ck.atom_count_hist.clone(),
        element_set: Vec::new(),
        skipped: 0,
    };
    let mut crystals = Vec::new();
    match &csp {
        Some(p) => {
            let comps = compositions(p)?;
            for (ci, comp) in comps.iter().enumerate() {
                for k in 0..n {
                    let mut rng = chain_rng(seed, (ci * n + k) as u64);
                    crystals.push(sample_csp(&model, comp, &ck.token_table, &cfg.sampler, &mut rng)?);
                }
            }
        }
        None => {
            for k in 0..n {
                let mut rng = chain_rng(seed, k as u64);
                let mut tries = 0;
                loop {
                    let atoms = corpus_hist.sample_atom_count(&mut rng);
                    match sample_dng(&model, &ck.token_table, atoms, &cfg.sampler, &mut rng) {
                        Ok(c) => {
                            crystals.push(c);
                            break;
                        }
                        Err(xtal::Error::ZeroToken) if tries < 10 => tries += 1,
                        Err(e) => return Err(e.into()),
                    }
                }
            }
        }
    }
    write_crystals(&out, &crystals, &cfg.hash())?;
    println!("wrote {} crystals to {}", crystals.len(), out.display());
    Ok(())
}

fn report_json<T: serde::Serialize>(report: &T, inputs: &[&Path]) -> Res<String> {
    let mut v = serde_json::to_value(report).map_err(|e| Failure { code: 1, msg: e.to_string() })?;
    let names: Vec<String> = inputs.iter().map(|p| p.display().to_string()).collect();
    let hash = xtal::config::RunConfig::default().hash();
    if let Some(o) = v.as_object_mut() {
        o.insert("tool_version".into(), VERSION.into());
        o.insert("config_hash".into(), hash.into());
        o.insert("inputs".into(), names.into());
    }
    serde_json::to_string_pretty(&v).map_err(|e| Failure { code: 1, msg: e.to_string() })
}

fn load_set(path: &Path) -> Res<Vec<Crystal>> {
    if !path.exists() {
        return Err(Failure::usage(format!("{}: file not found", path.display())));
    }
    with_path(path, read_jsonl(path))
}

fn eval(generated: PathBuf, reference: PathBuf, stability: Option<PathBuf>, out: PathBuf) -> Res<()> {
    let gen = load_set(&generated)?;
    let refs = load_set(&reference)?;
    let ehull = match &stability {
        Some(p) => Some(with_path(p, read_stability(p))?),
        None => None,
    };
    let report = evaluate(&gen, &refs, ehull.as_ref(), &MatchTolerances::default())?;
    for w in &report.warnings {
        log::warn!("{w}");
    }
    write_file(&out, &report_json(&report, &[&generated, &reference])?)?;
    println!(
        "n={} valid={:.4} comp={:.4} unique={:.4} novel={:.4} un={:.4}",
        report.n_generated, report.struct_val, report.comp_val, report.unique, report.novel, report.un
    );
    Ok(())
}

fn csp_eval(predictions: PathBuf, truths: PathBuf, out: PathBuf) -> Res<()> {
    let p = load_set(&predictions)?;
    let t = load_set(&truths)?;
    let (mr, rmsd) = csp_metrics(&p, &t, &MatchTolerances::default())?;
    let report = serde_json::json!({ "n": p.len(), "match_rate": mr, "rmsd": rmsd });
    write_file(&out, &report_json(&report, &[&predictions, &truths])?)?;
    println!("n={} match_rate={mr:.4} rmsd={}", p.len(), rmsd.map(|r| format!("{r:.4}")).unwrap_or_else(|| "none".into()));
    Ok(())
}

fn dataset_stats(file: PathBuf, max_atoms: usize) -> Res<()> {
    if !file.exists() {
        return Err(Failure::usage(format!("{}: file not found", file.display())));
    }
    let corpus = with_path(&file, load_corpus(&file, max_atoms))?;
    println!("crystals {} (skipped {})", corpus.len(), corpus.skipped);
    println!("n_atoms,probability");
    for (n, p) in &corpus.atom_count_hist {
        println!("{n},{p}");
    }
    let mut counts: BTreeMap<u8, usize> = BTreeMap::new();
    for c in &corpus.crystals {
        for &z in &c.atomic_numbers {
            *counts.entry(z).or_default() += 1;
        }
    }
    let inventory: Vec<String> = counts.iter().map(|(z, k)| format!("{}:{k}", symbol(*z))).collect();
    println!("elements {} {}", counts.len(), inventory.join(" "));
    Ok(())
}

fn geom(cmd: GeomCmd) -> Res<()> {
    match cmd {
        GeomCmd::MinImage { coords, lattice } => {
            let l = lattice.matrix();
            if !(l.determinant() > 0.0) {
                return Err(Failure::usage("lattice must have positive determinant"));
            }
            let r = min_image(&[coords[0], coords[1], coords[2]], &[coords[3], coords[4], coords[5]], &l, 1);
            let d = r.delta_frac;
            println!("({}, {}, {}) d={}", num(d[0]), num(d[1]), num(d[2]), num(r.cart_dist));
        }
        GeomCmd::Wrap { values } => println!("{}", values.iter().map(|&v| num(wrap(v))).collect::<Vec<_>>().join(" ")),
        GeomCmd::Mod1 { values } => println!("{}", values.iter().map(|&v| num(mod1(v))).collect::<Vec<_>>().join(" ")),
        GeomCmd::LatentRoundtrip { lattice } => {
            let l = lattice.matrix();
            let y = latent_from_lattice(&l)?;
            let back = lattice_from_latent(&y)?;
            let (la, aa) = lattice_parameters(&l);
            let (lb, ab) = lattice_parameters(&back);
            let err = (0..3).map(|k| (la[k] - lb[k]).abs().max((aa[k] - ab[k]).abs())).fold(0.0, f64::max);
            println!("latent {:?}", y.0);
            println!("max parameter error {err:e}");
        }
    }
    Ok(())
}

fn schedule(dump: bool, run: RunArgs, aa: Vec<(String, String)>) -> Res<()> {
    let mut extra = aa;
    if let Some(s) = run.steps {
        extra.push(("sample_steps".into(), s.to_string()));
    }
    let cfg = resolve(&run, extra)?;
    let csv = schedule_csv(&cfg.sampler)?;
    if dump {
        print!("{}{csv}", header(&cfg.hash()));
    } else {
        println!("{} steps, sigma {} -> {}, rho {}", cfg.sampler.steps, cfg.sampler.sigma_max, cfg.sampler.sigma_min, cfg.sampler.rho);
    }
    Ok(())
}

fn run(cli: Cli) -> Res<()> {
    match cli.cmd {
        Cmd::BuildTokens { elements, dh, no_pca, out } => build_tokens(elements, dh, no_pca, out),
        Cmd::Train { data, out, run, log, reference, tokens } => train(data, out, run, log, reference, tokens),
        Cmd::Sample { ckpt, n, out, csp, run, aa_coords, aa_types, aa_lattice, aa_cap } => {
            sample(ckpt, n, out, csp, run, aa_flags(aa_coords, aa_types, aa_lattice, aa_cap))
        }
        Cmd::Eval { generated, reference, stability, out } => eval(generated, reference, stability, out),
        Cmd::CspEval { predictions, truths, out } => csp_eval(predictions, truths, out),
        Cmd::Dataset { cmd: DatasetCmd::Stats { file, max_atoms } } => dataset_stats(file, max_atoms),
        Cmd::Dataset { cmd: DatasetCmd::Toy { out } } => {
            with_path(&out, xtal::dataset::write_jsonl(&out, &xtal::dataset::toy_corpus()))?;
            println!("wrote 16 crystals to {}", out.display());
            Ok(())
        }
        Cmd::Geom { cmd } => geom(cmd),
        Cmd::Schedule { dump, run, aa_coords, aa_types, aa_lattice, aa_cap } => {
            schedule(dump, run, aa_flags(aa_coords, aa_types, aa_lattice, aa_cap))
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.msg);
            ExitCode::from(f.code)
        }
    }
}
