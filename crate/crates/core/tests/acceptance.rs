//! Acceptance checks, one line per criterion. Exits nonzero if any fails.

use std::time::{Duration, Instant};

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, StandardNormal};

use odx_core::characteristics::{analyze, extract_characteristics, StructureOptions, StructureStatus};
use odx_core::deflators::{numeraire_portfolio, DeflatorFamily, FamilyOptions};
use odx_core::lp::polytope_vertices;
use odx_core::mcengine::{
    deflate_paths, martingale_test, matched_binomial_market, sample_stats, simulate, DiffusionSpec,
};
use odx_core::model::{b1, random_market, t1, RandomMarketConfig};
use odx_core::optdecomp::{
    decompose_kw, decompose_lp, is_supermartingale_under_all, reconstruct, LpOptions, Verdict, SUPERMARTINGALE_TOL,
};
use odx_core::superhedge::{snell_envelope_by_vertices, superhedge, Claim, ClaimKind, Vanilla};
use odx_core::{AdaptedProcess, EventTree, Market, PredictableProcess};

const RANDOM_TREES: u64 = 200;

type Check = Result<String, String>;

/// Name, check and optional runtime budget.
type Criterion = (&'static str, fn() -> Check, Option<Duration>);

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn random_trees(complete: bool) -> impl Iterator<Item = (u64, Market)> {
    let cfg = RandomMarketConfig {
        complete,
        ..Default::default()
    };
    (0..RANDOM_TREES).map(move |seed| (seed, random_market(seed, &cfg)))
}

/// Largest `|Σ p Δ(Y Z)|` over inner nodes, written out from the tree.
fn max_drift(tree: &EventTree, y: &AdaptedProcess, z: impl Fn(usize) -> f64) -> f64 {
    let mut worst = 0.0_f64;
    for node in tree.inner_nodes() {
        let base = y.value(node) * z(node);
        let drift: f64 = tree
            .children(node)
            .iter()
            .zip(tree.child_probs(node))
            .map(|(&c, p)| p * (y.value(c) * z(c) - base))
            .sum();
        worst = worst.max(drift.abs());
    }
    worst
}

/// `V0 + Σ⟨H, ΔX⟩ − C` along each path, written out from the tree.
fn rebuild(tree: &EventTree, v0: f64, h: &PredictableProcess, c: &AdaptedProcess, x: &AdaptedProcess) -> Vec<f64> {
    let mut gains = vec![0.0; tree.len()];
    for node in tree.inner_nodes() {
        for &ch in tree.children(node) {
            let g: f64 = (0..x.dim())
                .map(|i| h.at(node)[i] * (x.at(ch)[i] - x.at(node)[i]))
                .sum();
            gains[ch] = gains[node] + g;
        }
    }
    (0..tree.len()).map(|n| v0 + gains[n] - c.value(n)).collect()
}

/// A value process with `V(node) ≥ max_q E_q V(child)` over every vertex
/// martingale measure, plus random nonnegative slack at some nodes.
fn universal_supermartingale(tree: &EventTree, x: &AdaptedProcess, rng: &mut ChaCha8Rng) -> AdaptedProcess {
    let mut v = AdaptedProcess::zeros(tree, 1);
    for leaf in tree.leaves() {
        let z: f64 = StandardNormal.sample(rng);
        v.at_mut(leaf)[0] = z;
    }
    let slack = Exp::new(10.0).expect("positive rate");
    for node in tree.inner_nodes().rev() {
        let incs = x.child_increments(tree, node);
        let verts = polytope_vertices(&incs, 8).expect("at most 8 branches");
        let sup = verts
            .iter()
            .map(|q| {
                q.iter()
                    .zip(tree.children(node))
                    .map(|(qj, &c)| qj * v.value(c))
                    .sum::<f64>()
            })
            .fold(f64::NEG_INFINITY, f64::max);
        let extra = if rng.random_bool(0.5) { slack.sample(rng) } else { 0.0 };
        v.at_mut(node)[0] = sup + extra;
    }
    v
}

fn min_dc(tree: &EventTree, c: &AdaptedProcess) -> f64 {
    tree.nodes()
        .iter()
        .filter_map(|n| n.parent.map(|p| c.value(n.id) - c.value(p)))
        .fold(f64::INFINITY, f64::min)
}

fn criterion_1() -> Check {
    let mut worst: f64 = 0.0;
    let mut count = 0usize;
    let markets = std::iter::once((u64::MAX, b1())).chain(random_trees(false));
    for (seed, m) in markets {
        let opts = FamilyOptions {
            seed,
            ..Default::default()
        };
        let fam = DeflatorFamily::build(&m.tree, &m.x, opts).map_err(|e| format!("seed {seed}: {e}"))?;
        for y in fam.deflators() {
            count += 1;
            worst = worst.max(max_drift(&m.tree, y, |_| 1.0));
            for i in 0..m.x.dim() {
                worst = worst.max(max_drift(&m.tree, y, |n| m.x.at(n)[i]));
            }
        }
    }
    ensure(worst <= 1e-10, || format!("max drift {worst:e} > 1e-10"))?;
    Ok(format!("{count} deflators, max |Σp·Δ(Y·Z)| = {worst:.2e} (tol 1e-10)"))
}

fn criterion_2() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst_rec: f64 = 0.0;
    let mut worst_dc = f64::INFINITY;
    for (seed, m) in random_trees(false) {
        let d = m.x.dim();
        for k in 0..20 {
            let h = PredictableProcess::from_fn(&m.tree, d, |_| {
                (0..d).map(|_| StandardNormal.sample(&mut rng)).collect()
            })
            .unwrap();
            let mut c = AdaptedProcess::zeros(&m.tree, 1);
            for node in m.tree.inner_nodes() {
                for &ch in m.tree.children(node) {
                    let inc = if rng.random_bool(0.5) {
                        rng.random_range(0.0..0.2)
                    } else {
                        0.0
                    };
                    c.at_mut(ch)[0] = c.value(node) + inc;
                }
            }
            let v0: f64 = StandardNormal.sample(&mut rng);
            let v = reconstruct(&m.tree, v0, &h, &c, &m.x).unwrap();
            let cert = is_supermartingale_under_all(&m.tree, &v, &m.x, None, SUPERMARTINGALE_TOL).unwrap();
            ensure(cert.verdict == Verdict::Pass, || {
                format!("seed {seed} pair {k}: reconstructed process rejected")
            })?;
        }
        for k in 0..20 {
            let v = universal_supermartingale(&m.tree, &m.x, &mut rng);
            let dec = decompose_lp(&m.tree, &v, &m.x, LpOptions::default())
                .map_err(|e| format!("seed {seed} process {k}: {e}"))?;
            let rec = rebuild(&m.tree, dec.v0, &dec.h, &dec.c, &m.x);
            let err = rec
                .iter()
                .enumerate()
                .map(|(n, r)| (r - v.value(n)).abs())
                .fold(0.0, f64::max);
            worst_rec = worst_rec.max(err);
            worst_dc = worst_dc.min(min_dc(&m.tree, &dec.c));
        }
    }
    ensure(worst_dc >= -1e-10, || format!("min ΔC {worst_dc:e} < -1e-10"))?;
    ensure(worst_rec <= 1e-9, || {
        format!("reconstruction error {worst_rec:e} > 1e-9")
    })?;
    Ok(format!(
        "4000 (H,C) pairs PASS; 4000 decompositions: min ΔC = {worst_dc:.2e}, max rec err = {worst_rec:.2e}"
    ))
}

fn criterion_3() -> Check {
    let m = t1();
    let v = AdaptedProcess::scalar(&m.tree, vec![1.0, 1.0, 0.0, 1.0]).unwrap();
    let dec = decompose_lp(&m.tree, &v, &m.x, LpOptions::default()).map_err(|e| e.to_string())?;
    let h = dec.h.value(0);
    ensure(h.abs() <= 1e-9, || format!("H = {h:e}"))?;
    let dc: Vec<f64> = m
        .tree
        .children(0)
        .iter()
        .map(|&c| dec.c.value(c) - dec.c.value(0))
        .collect();
    for (got, want) in dc.iter().zip([0.0, 1.0, 0.0]) {
        ensure((got - want).abs() <= 1e-9, || format!("ΔC = {dc:?}"))?;
    }
    let short = AdaptedProcess::scalar(&m.tree, vec![0.9, 1.0, 0.0, 1.0]).unwrap();
    let cert = is_supermartingale_under_all(&m.tree, &short, &m.x, None, SUPERMARTINGALE_TOL).unwrap();
    ensure(cert.verdict == Verdict::Fail, || "V(0) = 0.9 accepted".into())?;
    let (node, violation) = match cert.witness {
        Some(odx_core::optdecomp::Witness::Measure { node, violation, .. }) => (node, violation),
        other => return Err(format!("unexpected witness {other:?}")),
    };
    ensure(node == 0 && (violation - 0.1).abs() <= 1e-9, || {
        format!("violation {violation} at node {node}")
    })?;
    Ok(format!(
        "H = {h:.1e}, ΔC = {dc:?}; V(0)=0.9 FAIL at root, violation {violation:.12}"
    ))
}

fn criterion_4() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst_kw: f64 = 0.0;
    for (seed, m) in random_trees(true) {
        let v = universal_supermartingale(&m.tree, &m.x, &mut rng);
        let num = numeraire_portfolio(&m.tree, &m.x).map_err(|e| format!("seed {seed}: {e}"))?;
        let lp = decompose_lp(&m.tree, &v, &m.x, LpOptions::default()).map_err(|e| e.to_string())?;
        let kw = decompose_kw(&m.tree, &v, &m.x, &num, 1e-10).map_err(|e| e.to_string())?;
        ensure(kw.diagnostics.deferred_nodes.is_empty(), || {
            format!("seed {seed}: complete tree deferred nodes")
        })?;
        worst_kw = worst_kw.max(lp.c.max_abs_diff(&kw.c));
    }
    ensure(worst_kw <= 1e-8, || format!("KW vs LP C differ by {worst_kw:e}"))?;

    let mut worst_seed: f64 = 0.0;
    for (seed, m) in random_trees(false) {
        let v = universal_supermartingale(&m.tree, &m.x, &mut rng);
        let a = decompose_lp(
            &m.tree,
            &v,
            &m.x,
            LpOptions {
                tie_break_seed: Some(seed),
            },
        )
        .map_err(|e| e.to_string())?;
        let b = decompose_lp(
            &m.tree,
            &v,
            &m.x,
            LpOptions {
                tie_break_seed: Some(seed + 1000),
            },
        )
        .map_err(|e| e.to_string())?;
        let ga = rebuild(&m.tree, 0.0, &a.h, &AdaptedProcess::zeros(&m.tree, 1), &m.x);
        let gb = rebuild(&m.tree, 0.0, &b.h, &AdaptedProcess::zeros(&m.tree, 1), &m.x);
        let gain_diff = ga.iter().zip(&gb).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        worst_seed = worst_seed.max(gain_diff).max(a.c.max_abs_diff(&b.c));
    }
    ensure(worst_seed <= 1e-8, || {
        format!("tie-break runs differ by {worst_seed:e}")
    })?;
    Ok(format!(
        "complete trees: max |C_KW − C_LP| = {worst_kw:.2e}; tie-break seeds: max diff = {worst_seed:.2e}"
    ))
}

fn criterion_5() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst_n: f64 = 0.0;
    let mut worst_db = f64::INFINITY;
    for (seed, m) in random_trees(true) {
        let v = universal_supermartingale(&m.tree, &m.x, &mut rng);
        let num = numeraire_portfolio(&m.tree, &m.x).map_err(|e| format!("seed {seed}: {e}"))?;
        let kw = decompose_kw(&m.tree, &v, &m.x, &num, 1e-10).map_err(|e| e.to_string())?;
        worst_n = worst_n.max(kw.diagnostics.n_norm);
        worst_db = worst_db.min(kw.diagnostics.min_db);
    }
    ensure(worst_n <= 1e-10, || format!("N_norm {worst_n:e} > 1e-10"))?;
    ensure(worst_db >= -1e-10, || format!("min ΔB {worst_db:e} < -1e-10"))?;

    let m = t1();
    let v = AdaptedProcess::scalar(&m.tree, vec![1.0, 1.0, 0.0, 1.0]).unwrap();
    let num = numeraire_portfolio(&m.tree, &m.x).map_err(|e| e.to_string())?;
    let kw = decompose_kw(&m.tree, &v, &m.x, &num, 1e-10).map_err(|e| e.to_string())?;
    let t1_n = kw.diagnostics.n_norm;
    ensure(t1_n > 0.1 && kw.diagnostics.deferred_nodes == vec![0], || {
        format!("T1: N_norm {t1_n}, deferred {:?}", kw.diagnostics.deferred_nodes)
    })?;
    Ok(format!(
        "complete: max N_norm = {worst_n:.2e}, min ΔB = {worst_db:.2e}; T1: N_norm = {t1_n:.4}, root deferred"
    ))
}

fn criterion_6() -> Check {
    let m = Market::builtin("a1").unwrap();
    let rep = analyze(&m.tree, &m.x, StructureOptions::default()).map_err(|e| e.to_string())?;
    ensure(rep.status == StructureStatus::Arbitrage, || {
        "A1 reported solvable".into()
    })?;
    let zeta = rep.zeta.as_ref().unwrap().vector(0);
    let ch = extract_characteristics(&m.tree, &m.x).map_err(|e| e.to_string())?;
    let cz = ch.covariance(0) * &zeta;
    let za = zeta.dot(&ch.drift(0));
    ensure(cz.iter().all(|&v| v == 0.0), || format!("cζ = {cz:?}"))?;
    ensure((za - 1.0).abs() <= 1e-15, || format!("⟨ζ,a⟩ = {za}"))?;

    // Sample the step and trade ζ.
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let probs = m.tree.child_probs(0);
    let incs = m.x.child_increments(&m.tree, 0);
    let gains: Vec<f64> = (0..10_000)
        .map(|_| {
            let u: f64 = rng.random();
            let j = if u < probs[0] { 0 } else { 1 };
            zeta.dot(&incs[j])
        })
        .collect();
    let lo = gains.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = gains.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    ensure(lo > 0.0 && lo == hi, || format!("simulated gains in [{lo}, {hi}]"))?;
    Ok(format!(
        "ζ = {:?}, cζ = 0, ⟨ζ,a⟩ = {za}; 10000 sampled gains all = {lo}",
        zeta.as_slice()
    ))
}

fn criterion_7() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut worst = f64::NEG_INFINITY;
    for (seed, m) in random_trees(false) {
        let num = numeraire_portfolio(&m.tree, &m.x).map_err(|e| format!("seed {seed}: {e}"))?;
        let d = m.x.dim();
        for _ in 0..100 {
            // Random fractions, shrunk so wealth stays positive on every branch.
            let mut wealth = vec![1.0; m.tree.len()];
            for node in m.tree.inner_nodes() {
                let mut pi = DVector::from_fn(d, |_, _| rng.sample::<f64, _>(StandardNormal) * 5.0);
                let incs = m.x.child_increments(&m.tree, node);
                let worst_ret = incs.iter().map(|dx| pi.dot(dx)).fold(f64::INFINITY, f64::min);
                if worst_ret < -0.95 {
                    pi *= -0.95 / worst_ret;
                }
                for (&ch, dx) in m.tree.children(node).iter().zip(&incs) {
                    wealth[ch] = wealth[node] * (1.0 + pi.dot(dx));
                }
            }
            let ratio: f64 = m
                .tree
                .leaves()
                .map(|l| m.tree.path_probability(l) * wealth[l] / num.v_hat.value(l))
                .sum();
            worst = worst.max(ratio);
        }
    }
    ensure(worst <= 1.0 + 1e-9, || format!("E[V/V̂] = {worst} > 1 + 1e-9"))?;
    Ok(format!("20000 strategies, max E[V_π(T)/V̂(T)] = {worst:.15}"))
}

fn criterion_8() -> Check {
    let m = Market::builtin("put2").unwrap();
    let claim = Claim::vanilla(&m.tree, &m.x, ClaimKind::American, Vanilla::Put, 0, 1.05).map_err(|e| e.to_string())?;
    let sh = superhedge(&m.tree, &claim, &m.x, LpOptions::default()).map_err(|e| e.to_string())?;
    let h0 = sh.decomposition.h.value(0);
    let cmax = sh.decomposition.c.raw().iter().map(|c| c.abs()).fold(0.0, f64::max);
    ensure((sh.price - 0.09).abs() <= 1e-10, || format!("put price {}", sh.price))?;
    ensure((h0 + 0.6).abs() <= 1e-10, || format!("root hedge {h0}"))?;
    ensure(cmax <= 1e-10, || format!("max |C| = {cmax:e}"))?;

    let t = t1();
    let payoff = AdaptedProcess::scalar(&t.tree, vec![0.0, 1.0, 0.0, 1.0]).unwrap();
    let claim = Claim::new(&t.tree, ClaimKind::European, payoff).map_err(|e| e.to_string())?;
    let sh = superhedge(&t.tree, &claim, &t.x, LpOptions::default()).map_err(|e| e.to_string())?;
    let by_vertices = snell_envelope_by_vertices(&t.tree, &claim, &t.x)
        .map_err(|e| e.to_string())?
        .ok_or("vertex enumeration skipped")?;
    let gap = (sh.price - by_vertices.value(0)).abs();
    ensure((sh.price - 1.0).abs() <= 1e-10 && gap <= 1e-8, || {
        format!("T1 price {}, duality gap {gap:e}", sh.price)
    })?;
    Ok(format!(
        "put: price {:.12}, H(0) = {h0:.12}, max |C| = {cmax:.1e}; T1: price {:.12}, gap {gap:.1e}",
        0.09, sh.price
    ))
}

fn criterion_9() -> Check {
    let mut spec = DiffusionSpec::scalar(0.05, 0.2, 1.0, 256, 100_000, 9);
    spec.record_stride = 32;
    let ens = simulate(&spec).map_err(|e| e.to_string())?;
    let defl = deflate_paths(&ens, &spec).map_err(|e| e.to_string())?;
    let last = defl.y_hat.times.len() - 1;
    let y_t: Vec<f64> = (0..spec.paths)
        .filter(|&p| defl.y_hat.valid[p])
        .map(|p| defl.y_hat.at(p, last)[0])
        .collect();
    let stats = sample_stats(&y_t);
    let dev = (stats.mean - 1.0).abs();
    ensure(dev <= 3.0 * stats.std_err, || {
        format!("mean Ŷ(T) = {} (se {})", stats.mean, stats.std_err)
    })?;
    let yx = defl.y_hat.scale(&ens.x).map_err(|e| e.to_string())?;
    let test = martingale_test(&yx, 8);
    ensure(test.pass, || {
        format!("Ŷ·X martingale test max |t| = {}", test.max_abs_t)
    })?;

    let gap = |n: usize| {
        let m = matched_binomial_market(0.05, 0.2, 1.0, n, 1);
        let num = numeraire_portfolio(&m.tree, &m.x).expect("matched tree has a numéraire");
        (num.rho_hat.value(0) - 1.25).abs()
    };
    let ratio = gap(256) / gap(512);
    ensure((1.5..=3.0).contains(&ratio), || format!("gap ratio {ratio}"))?;
    Ok(format!(
        "mean Ŷ(T) = {:.6} ± {:.6}, Ŷ·X max |t| = {:.2}, ρ gap ratio n=256→512: {ratio:.3}",
        stats.mean, stats.std_err, test.max_abs_t
    ))
}

fn main() {
    let criteria: [Criterion; 9] = [
        ("exact deflator identities", criterion_1, Some(Duration::from_secs(10))),
        (
            "decomposition equivalence, brute force",
            criterion_2,
            Some(Duration::from_secs(60)),
        ),
        ("hand instance T1", criterion_3, None),
        ("uniqueness across routes and seeds", criterion_4, None),
        ("projection-route diagnostics", criterion_5, None),
        ("arbitrage certificate", criterion_6, None),
        ("numéraire property", criterion_7, None),
        ("superhedging duality", criterion_8, None),
        ("Monte Carlo consistency", criterion_9, Some(Duration::from_secs(120))),
    ];
    let mut failures = 0;
    for (k, (name, check, budget)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let result = std::panic::catch_unwind(check).unwrap_or_else(|_| Err("panicked".into()));
        let elapsed = start.elapsed();
        let result = match (result, budget) {
            (Ok(_), Some(b)) if elapsed > *b => Err(format!("runtime {elapsed:.2?} over budget {b:?}")),
            (r, _) => r,
        };
        let (tag, detail) = match &result {
            Ok(d) => ("PASS", d.as_str()),
            Err(d) => ("FAIL", d.as_str()),
        };
        if result.is_err() {
            failures += 1;
        }
        println!("[{tag}] {} {name} ({elapsed:.2?}): {detail}", k + 1);
    }
    println!("acceptance: {} passed, {failures} failed", criteria.len() - failures);
    if failures > 0 {
        std::process::exit(1);
    }
}
