//! The `odx` command line.
//!
//! Every subcommand prints one compact JSON document on stdout (also written
//! to `--out` when given, next to any CSV tables). Exit codes: 0 on success,
//! 2 when the mathematics says no (arbitrage, a supermartingale violation, a
//! failed check) with a witness in the JSON, 1 on bad input.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::{json, Value};

use odx_core::characteristics::{extract_characteristics, solve_structure, StructureOptions, StructureStatus};
use odx_core::deflators::{numeraire_portfolio, verify_deflator, DeflatorFamily, FamilyOptions, Numeraire};
use odx_core::io::{
    decomposition_csv, float_csv, parse_claim, parse_decomposition, parse_model, parse_value, to_json,
    DecompositionOut, InputError, ModelInput, NodeMap, SCHEMA_VERSION,
};
use odx_core::mcengine::{deflate_paths, martingale_test, sample_stats, simulate, DiffusionSpec};
use odx_core::optdecomp::{
    check_uniqueness, decompose_kw, decompose_lp, is_supermartingale_under_all, reconstruct, Decomposition, LpOptions,
    Verdict, UNIQUENESS_TOL,
};
use odx_core::superhedge::{snell_envelope_by_vertices, superhedge};
use odx_core::{AdaptedProcess, Market, OdxError, PredictableProcess};

pub const EXIT_OK: i32 = 0;
pub const EXIT_INPUT: i32 = 1;
pub const EXIT_FAIL: i32 = 2;

/// Reconstruction tolerance used by `verify`.
const RECONSTRUCTION_TOL: f64 = 1e-9;

#[derive(Debug, Parser)]
#[command(name = "odx", version, about = "Optional decomposition of supermartingales")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct ModelArgs {
    /// Model JSON file (tree, X and optionally V).
    #[arg(required_unless_present = "builtin")]
    model: Option<PathBuf>,
    /// Use a built-in model instead: b1, t1, a1 or put2.
    #[arg(long, conflicts_with = "model")]
    builtin: Option<String>,
}

#[derive(Debug, Args)]
struct Common {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1e-10)]
    tol: f64,
    /// Directory for the JSON report and CSV tables.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum RouteArg {
    Lp,
    Kw,
    Both,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Characteristics and the structure condition `a = cρ`.
    Analyze {
        #[command(flatten)]
        model: ModelArgs,
        #[command(flatten)]
        common: Common,
    },
    /// Numéraire portfolio and a seeded family of deflators.
    Deflate {
        #[command(flatten)]
        model: ModelArgs,
        #[command(flatten)]
        common: Common,
        /// Number of product deflators besides the numéraire one.
        #[arg(long, default_value_t = 8)]
        extras: usize,
    },
    /// Supermartingale test and optional decomposition of V.
    Decompose {
        #[command(flatten)]
        model: ModelArgs,
        #[command(flatten)]
        common: Common,
        /// Value process file (node map); defaults to the model's "V".
        #[arg(long)]
        value: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = RouteArg::Lp)]
        route: RouteArg,
    },
    /// Superhedging price and strategy of a claim.
    Superhedge {
        #[command(flatten)]
        model: ModelArgs,
        #[command(flatten)]
        common: Common,
        /// Claim JSON file.
        #[arg(long)]
        claim: PathBuf,
    },
    /// Euler simulation, pathwise deflators and martingale tests.
    Simulate {
        /// Diffusion spec JSON file.
        spec: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        paths: Option<usize>,
        #[arg(long)]
        steps: Option<usize>,
        /// Number of time buckets in the martingale tests.
        #[arg(long, default_value_t = 8)]
        buckets: usize,
        /// Paths written to paths.csv under --out.
        #[arg(long, default_value_t = 100)]
        csv_paths: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Checks a decomposition file against a model.
    Verify {
        #[command(flatten)]
        model: ModelArgs,
        #[command(flatten)]
        common: Common,
        /// Decomposition JSON as written by `decompose`.
        #[arg(long)]
        decomposition: PathBuf,
    },
}

/// Why a command stopped early.
enum Stop {
    Input(String),
    Fail(Value),
}

impl From<InputError> for Stop {
    fn from(e: InputError) -> Self {
        Stop::Input(e.to_string())
    }
}

impl From<OdxError> for Stop {
    fn from(e: OdxError) -> Self {
        match e {
            OdxError::Arbitrage { node, detail } => Stop::Fail(json!({
                "verdict": "FAIL",
                "witness": {"kind": "arbitrage", "node": node, "detail": detail},
            })),
            other => Stop::Input(other.to_string()),
        }
    }
}

/// A finished report and whether it counts as a failure.
struct Report {
    body: Value,
    fail: bool,
    files: Vec<(String, String)>,
}

fn nodes<T: Serialize>(v: T) -> Value {
    serde_json::to_value(v).expect("plain data serializes")
}

fn adapted(p: &AdaptedProcess) -> Value {
    nodes(NodeMap::adapted(p))
}

fn predictable(p: &PredictableProcess) -> Value {
    nodes(NodeMap::predictable(p))
}

fn read(path: &Path) -> Result<String, Stop> {
    fs::read_to_string(path).map_err(|e| Stop::Input(format!("{}: {e}", path.display())))
}

fn load_model(args: &ModelArgs) -> Result<ModelInput, Stop> {
    match (&args.model, &args.builtin) {
        (_, Some(name)) => Market::builtin(name)
            .map(|market| ModelInput { market, v: None })
            .ok_or_else(|| Stop::Input(format!("unknown built-in model {name:?}"))),
        (Some(path), None) => {
            let text = read(path)?;
            parse_model(&text).map_err(|e| Stop::Input(format!("{}: {e}", path.display())))
        }
        (None, None) => Err(Stop::Input("no model given".into())),
    }
}

fn check_tol(tol: f64) -> Result<(), Stop> {
    if tol.is_finite() && tol > 0.0 {
        Ok(())
    } else {
        Err(Stop::Input(format!("--tol must be positive, got {tol}")))
    }
}

fn analyze(model: &ModelArgs, common: &Common) -> Result<Report, Stop> {
    check_tol(common.tol)?;
    let input = load_model(model)?;
    let Market { tree, x } = &input.market;
    let ch = extract_characteristics(tree, x)?;
    let opts = StructureOptions {
        tol: common.tol,
        ..Default::default()
    };
    let rep = solve_structure(tree, &ch, opts)?;
    let mut body = json!({
        "status": rep.status,
        "rho": rep.rho.as_ref().map(predictable),
        "zeta": rep.zeta.as_ref().map(predictable),
        "mass_max": rep.mass_max,
        "mass_flag": rep.mass_flag,
        "arbitrage_nodes": rep.arbitrage_nodes,
        "a": predictable(&ch.a),
        "c": predictable(&ch.c),
    });
    let fail = rep.status == StructureStatus::Arbitrage;
    if fail {
        let zeta = rep.zeta.as_ref().expect("arbitrage report carries zeta");
        let witnesses: Vec<Value> = rep
            .arbitrage_nodes
            .iter()
            .map(|&node| {
                let z = zeta.vector(node);
                let cz = ch.covariance(node) * &z;
                let gains: Vec<f64> = x.child_increments(tree, node).iter().map(|dx| z.dot(dx)).collect();
                json!({
                    "kind": "arbitrage",
                    "node": node,
                    "zeta": z.as_slice(),
                    "c_zeta": cz.as_slice(),
                    "zeta_dot_a": z.dot(&ch.drift(node)),
                    "gains": gains,
                })
            })
            .collect();
        body["witness"] = Value::Array(witnesses);
    }
    Ok(Report {
        body,
        fail,
        files: Vec::new(),
    })
}

fn family(input: &ModelInput, num: Numeraire, seed: u64, extras: usize) -> Result<DeflatorFamily, Stop> {
    let opts = FamilyOptions {
        extras,
        seed,
        ..Default::default()
    };
    Ok(DeflatorFamily::from_numeraire(
        &input.market.tree,
        &input.market.x,
        num,
        opts,
    )?)
}

fn deflate(model: &ModelArgs, common: &Common, extras: usize) -> Result<Report, Stop> {
    check_tol(common.tol)?;
    let input = load_model(model)?;
    let Market { tree, x } = &input.market;
    let num = numeraire_portfolio(tree, x)?;
    let fam = family(&input, num, common.seed, extras)?;
    let mut checks = Vec::new();
    let mut fail = false;
    for y in fam.deflators() {
        let c = verify_deflator(tree, y, x, common.tol)?;
        fail |= !c.pass;
        checks.push(nodes(c));
    }
    let extras: Vec<Value> = fam
        .extras
        .iter()
        .map(|e| json!({"L": adapted(&e.l), "Y": adapted(&e.y)}))
        .collect();
    let body = json!({
        "rho_hat": predictable(&fam.rho_hat),
        "V_hat": adapted(&fam.v_hat),
        "Y_hat": adapted(&fam.y_hat),
        "extras": extras,
        "checks": checks,
    });
    Ok(Report {
        body,
        fail,
        files: Vec::new(),
    })
}

fn certificate_json(cert: &odx_core::optdecomp::Certificate) -> Value {
    json!({
        "verdict": cert.verdict,
        "witness": cert.witness,
        "nodes": cert.nodes,
    })
}

fn decompose(model: &ModelArgs, common: &Common, value: Option<&PathBuf>, route: RouteArg) -> Result<Report, Stop> {
    check_tol(common.tol)?;
    let input = load_model(model)?;
    let Market { tree, x } = &input.market;
    let v = match value {
        Some(path) => parse_value(&read(path)?, tree).map_err(|e| Stop::Input(format!("{}: {e}", path.display())))?,
        None => input
            .v
            .clone()
            .ok_or_else(|| Stop::Input("no value process: give --value or a model with \"V\"".into()))?,
    };
    let num = numeraire_portfolio(tree, x)?;
    let fam = family(&input, num.clone(), common.seed, FamilyOptions::default().extras)?;
    let cert = is_supermartingale_under_all(tree, &v, x, Some(&fam), common.tol)?;
    if cert.verdict == Verdict::Fail {
        return Err(Stop::Fail(certificate_json(&cert)));
    }

    let mut decs: Vec<(&str, Decomposition)> = Vec::new();
    if matches!(route, RouteArg::Lp | RouteArg::Both) {
        decs.push(("lp", decompose_lp(tree, &v, x, LpOptions::default())?));
    }
    if matches!(route, RouteArg::Kw | RouteArg::Both) {
        decs.push(("kw", decompose_kw(tree, &v, x, &num, common.tol)?));
    }
    let mut fail = false;
    let mut body = json!({"verdict": "PASS", "certificate": certificate_json(&cert)});
    let mut files = Vec::new();
    let mut out = serde_json::Map::new();
    for (name, dec) in &decs {
        let min_dc = dec.min_dc(tree);
        fail |= min_dc < -common.tol;
        let mut entry = nodes(DecompositionOut::new(dec, &v));
        entry["min_dc"] = json!(min_dc);
        let mut flat = entry.clone();
        flat["odx_schema"] = json!(SCHEMA_VERSION);
        files.push((format!("decomposition_{name}.json"), to_json(&flat)));
        files.push((format!("decomposition_{name}.csv"), decomposition_csv(tree, &v, dec)));
        out.insert(name.to_uppercase(), entry);
    }
    body["decompositions"] = Value::Object(out);
    if let [(_, a), (_, b)] = decs.as_slice() {
        let rep = check_uniqueness(tree, a, b, x, UNIQUENESS_TOL)?;
        fail |= !rep.pass;
        body["uniqueness"] = nodes(rep);
    }
    if fail {
        body["verdict"] = json!("FAIL");
    }
    Ok(Report { body, fail, files })
}

fn superhedge_cmd(model: &ModelArgs, common: &Common, claim: &Path) -> Result<Report, Stop> {
    check_tol(common.tol)?;
    let input = load_model(model)?;
    let market = &input.market;
    let claim = parse_claim(&read(claim)?, market).map_err(|e| Stop::Input(format!("{}: {e}", claim.display())))?;
    let sh = superhedge(&market.tree, &claim, &market.x, LpOptions::default())?;
    let vertex = snell_envelope_by_vertices(&market.tree, &claim, &market.x)?;
    let vertex_price = vertex.as_ref().map(|v| v.value(0));
    let portfolio = sh.portfolio.as_ref().map(|p| {
        json!({
            "S": adapted(&p.s),
            "shares": predictable(&p.shares),
            "currency": predictable(&p.currency),
            "hedge_shares": predictable(&p.hedge_shares),
        })
    });
    let body = json!({
        "price": sh.price,
        "vertex_price": vertex_price,
        "duality_gap": vertex_price.map(|vp| (vp - sh.price).abs()),
        "envelope": adapted(&sh.envelope),
        "decomposition": nodes(DecompositionOut::new(&sh.decomposition, &sh.envelope)),
        "portfolio": portfolio,
    });
    let files = vec![(
        "hedge.csv".to_string(),
        decomposition_csv(&market.tree, &sh.envelope, &sh.decomposition),
    )];
    Ok(Report {
        body,
        fail: false,
        files,
    })
}

#[allow(clippy::too_many_arguments)]
fn simulate_cmd(
    spec_path: &Path,
    seed: Option<u64>,
    paths: Option<usize>,
    steps: Option<usize>,
    buckets: usize,
    csv_paths: usize,
) -> Result<Report, Stop> {
    let text = read(spec_path)?;
    let mut spec: DiffusionSpec = serde_json::from_str(&text)
        .map_err(|e| Stop::Input(format!("{}: {}", spec_path.display(), InputError::from(e))))?;
    if let Some(s) = seed {
        spec.seed = s;
    }
    if let Some(p) = paths {
        spec.paths = p;
    }
    if let Some(n) = steps {
        spec.steps = n;
    }
    spec.validate()?;
    let ens = simulate(&spec)?;
    let defl = deflate_paths(&ens, &spec)?;
    let last = ens.x.times.len() - 1;
    let dx_stats: Vec<Value> = (0..spec.dim)
        .map(|i| {
            let incs: Vec<f64> = (0..spec.paths).map(|p| ens.x.at(p, last)[i] - spec.x0[i]).collect();
            nodes(sample_stats(&incs))
        })
        .collect();
    let live: Vec<f64> = (0..spec.paths)
        .filter(|&p| defl.y_hat.valid[p])
        .map(|p| defl.y_hat.at(p, last)[0] - 1.0)
        .collect();
    let y_stats = sample_stats(&live);
    let y_test = martingale_test(&defl.y_hat, buckets);
    let yx = defl.y_hat.scale(&ens.x)?;
    let yx_test = martingale_test(&yx, buckets);
    let fail = !y_test.pass || !yx_test.pass || defl.flagged;
    let body = json!({
        "spec": spec,
        "x_increment": dx_stats,
        "deflation": {
            "aborted": defl.aborted,
            "abort_fraction": defl.abort_fraction,
            "flagged": defl.flagged,
            "max_rho": defl.max_rho,
            "Y_T_minus_one": y_stats,
        },
        "martingale_test": {"Y": y_test, "YX": yx_test},
        "verdict": if fail { "FAIL" } else { "PASS" },
    });
    let mut header = vec!["path".to_string(), "t".to_string()];
    header.extend((0..spec.dim).map(|i| format!("X_{i}")));
    header.push("V_hat".into());
    let rows = (0..spec.paths.min(csv_paths)).flat_map(|p| {
        let ens = &ens;
        let defl = &defl;
        (0..=last).map(move |k| {
            let mut row = vec![p as f64, ens.x.times[k]];
            row.extend(ens.x.at(p, k));
            row.push(defl.v_hat.at(p, k)[0]);
            row
        })
    });
    let files = vec![("paths.csv".to_string(), float_csv(&header, rows))];
    Ok(Report { body, fail, files })
}

fn verify(model: &ModelArgs, common: &Common, dec_path: &Path) -> Result<Report, Stop> {
    check_tol(common.tol)?;
    let input = load_model(model)?;
    let Market { tree, x } = &input.market;
    let dec = parse_decomposition(&read(dec_path)?, &input.market)
        .map_err(|e| Stop::Input(format!("{}: {e}", dec_path.display())))?;
    let v = input
        .v
        .clone()
        .or_else(|| dec.v.clone())
        .ok_or_else(|| Stop::Input("no value process in the model or the decomposition".into()))?;
    let rec = reconstruct(tree, dec.v0, &dec.h, &dec.c, x)?;

    let mut witness = Value::Null;
    let mut worst = (0.0_f64, 0usize);
    for node in 0..tree.len() {
        let err = (rec.value(node) - v.value(node)).abs();
        if err > worst.0 {
            worst = (err, node);
        }
    }
    if worst.0 > RECONSTRUCTION_TOL {
        witness = json!({
            "kind": "reconstruction",
            "node": worst.1,
            "expected": v.value(worst.1),
            "reconstructed": rec.value(worst.1),
        });
    }
    let mut min_dc = (f64::INFINITY, 0usize);
    for n in tree.nodes().iter().skip(1) {
        let dc = dec.c.value(n.id) - dec.c.value(n.parent.expect("non-root"));
        if dc < min_dc.0 {
            min_dc = (dc, n.id);
        }
    }
    if witness.is_null() && (dec.c.value(0) != 0.0 || min_dc.0 < -common.tol) {
        witness = json!({"kind": "consumption", "node": min_dc.1, "dC": min_dc.0, "C0": dec.c.value(0)});
    }
    let cert = is_supermartingale_under_all(tree, &v, x, None, common.tol)?;
    if witness.is_null() {
        if let Some(w) = &cert.witness {
            witness = nodes(w);
        }
    }
    let fail = !witness.is_null();
    let body = json!({
        "verdict": if fail { "FAIL" } else { "PASS" },
        "reconstruction_error": worst.0,
        "min_dc": min_dc.0,
        "certificate": cert.verdict,
        "witness": witness,
    });
    Ok(Report {
        body,
        fail,
        files: Vec::new(),
    })
}

fn command_name(c: &Command) -> &'static str {
    match c {
        Command::Analyze { .. } => "analyze",
        Command::Deflate { .. } => "deflate",
        Command::Decompose { .. } => "decompose",
        Command::Superhedge { .. } => "superhedge",
        Command::Simulate { .. } => "simulate",
        Command::Verify { .. } => "verify",
    }
}

fn out_dir(c: &Command) -> Option<&PathBuf> {
    match c {
        Command::Analyze { common, .. }
        | Command::Deflate { common, .. }
        | Command::Decompose { common, .. }
        | Command::Superhedge { common, .. }
        | Command::Verify { common, .. } => common.out.as_ref(),
        Command::Simulate { out, .. } => out.as_ref(),
    }
}

fn dispatch(c: &Command) -> Result<Report, Stop> {
    match c {
        Command::Analyze { model, common } => analyze(model, common),
        Command::Deflate { model, common, extras } => deflate(model, common, *extras),
        Command::Decompose {
            model,
            common,
            value,
            route,
        } => decompose(model, common, value.as_ref(), *route),
        Command::Superhedge { model, common, claim } => superhedge_cmd(model, common, claim),
        Command::Simulate {
            spec,
            seed,
            paths,
            steps,
            buckets,
            csv_paths,
            ..
        } => simulate_cmd(spec, *seed, *paths, *steps, *buckets, *csv_paths),
        Command::Verify {
            model,
            common,
            decomposition,
        } => verify(model, common, decomposition),
    }
}

fn configure_threads() -> Result<(), String> {
    let Ok(raw) = std::env::var("ODX_THREADS") else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .map_err(|_| format!("ODX_THREADS must be a positive integer, got {raw:?}"))?;
    if n == 0 {
        return Err("ODX_THREADS must be at least 1".into());
    }
    // A pool configured earlier in the same process stays in place.
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(())
}

fn finish(name: &str, mut body: Value) -> String {
    let mut doc = serde_json::Map::new();
    doc.insert("odx_schema".into(), json!(SCHEMA_VERSION));
    doc.insert("command".into(), json!(name));
    if let Value::Object(fields) = body.take() {
        doc.extend(fields);
    }
    to_json(&Value::Object(doc))
}

fn write_files(dir: &Path, name: &str, doc: &str, files: &[(String, String)]) -> Result<(), String> {
    fs::create_dir_all(dir).map_err(|e| format!("{}: {e}", dir.display()))?;
    let mut all = vec![(format!("{name}.json"), format!("{doc}\n"))];
    all.extend(files.iter().cloned());
    for (file, content) in all {
        let path = dir.join(file);
        fs::write(&path, content).map_err(|e| format!("{}: {e}", path.display()))?;
    }
    Ok(())
}

/// Runs the command line `args` (program name first), writing the report
/// to `stdout` and diagnostics to `stderr`; returns the exit code.
pub fn run_with<I, T>(args: I, stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            if e.use_stderr() {
                let _ = write!(stderr, "{}", e.render());
                return EXIT_INPUT;
            }
            let _ = write!(stdout, "{}", e.render());
            return EXIT_OK;
        }
    };
    if let Err(msg) = configure_threads() {
        let _ = writeln!(stderr, "error: {msg}");
        return EXIT_INPUT;
    }
    let name = command_name(&cli.command);
    let (doc, files, code) = match dispatch(&cli.command) {
        Ok(rep) => {
            let code = if rep.fail { EXIT_FAIL } else { EXIT_OK };
            (finish(name, rep.body), rep.files, code)
        }
        Err(Stop::Fail(body)) => (finish(name, body), Vec::new(), EXIT_FAIL),
        Err(Stop::Input(msg)) => {
            let _ = writeln!(stderr, "error: {msg}");
            return EXIT_INPUT;
        }
    };
    if let Some(dir) = out_dir(&cli.command) {
        if let Err(msg) = write_files(dir, name, &doc, &files) {
            let _ = writeln!(stderr, "error: {msg}");
            return EXIT_INPUT;
        }
    }
    let _ = writeln!(stdout, "{doc}");
    code
}

/// [`run_with`] on the process's standard streams.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let stdout = std::io::stdout();
    let stderr = std::io::stderr();
    run_with(args, &mut stdout.lock(), &mut stderr.lock())
}
