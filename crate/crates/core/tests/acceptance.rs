//! Acceptance criteria. Each test prints one `acceptance NN PASS|FAIL` line
//! to stderr (bypassing the harness capture) and then asserts.
//!
//! The criteria run one at a time behind a lock so that the measured
//! runtimes are not inflated by sibling tests. Pools shared by several
//! criteria are built once; their build time is charged to every
//! criterion that uses them.

use heavytail_sre::blocks::{self, BlockPartition};
use heavytail_sre::cli::{self, Command, Overrides, RunConfig};
use heavytail_sre::geometry::AlphaNorm;
use heavytail_sre::independence::{self, TauSpec};
use heavytail_sre::model::{BSpec, ContractivityCertificate, Coupling, Family, ScalarLaw};
use heavytail_sre::moments::{self, Method, ProfileOptions};
use heavytail_sre::simulate::{self, PoolOptions};
use heavytail_sre::tails::{self, Ladder};
use heavytail_sre::{CoeffBatch, Model, ModelSpec, SamplePool, SeedSequence, TailProfile};
use rand::Rng;
use std::io::Write;
use std::path::Path;
use std::sync::{Mutex, MutexGuard, OnceLock};
use std::time::{Duration, Instant};

static SERIAL: Mutex<()> = Mutex::new(());

fn serial() -> MutexGuard<'static, ()> {
    SERIAL.lock().unwrap_or_else(|e| e.into_inner())
}

fn verdict(n: u32, name: &str, pass: bool, elapsed: Duration, detail: &str) {
    let line = format!(
        "acceptance {n:02} {} {name} [{:.1}s] {detail}\n",
        if pass { "PASS" } else { "FAIL" },
        elapsed.as_secs_f64()
    );
    let _ = std::io::stderr().write_all(line.as_bytes());
    assert!(pass, "criterion {n} ({name}) failed: {detail}");
}

fn reference_spec() -> ModelSpec {
    ModelSpec::two_point(0.2, 2.0, 0.5, ScalarLaw::Exp { rate: 1.0 })
}

fn pair_spec(coupling: Coupling) -> ModelSpec {
    ModelSpec {
        d: 2,
        family: Family::TwoPoint { p: vec![0.2; 2], up: vec![2.0; 2], down: vec![0.5; 2], coupling },
        b_law: BSpec::iid(ScalarLaw::Exp { rate: 1.0 }),
        sigma_margin: 0.1,
    }
}

fn build_pool(model: &Model, chains: usize, n_per_chain: usize, seed: u64) -> SamplePool {
    let batch = CoeffBatch::draw(model, 100_000, &SeedSequence::new(seed).derive("certificate"));
    let cert = ContractivityCertificate::issue(model, &batch).expect("contractive model");
    simulate::stationary_pool(model, &cert, &PoolOptions::new(chains, n_per_chain), seed).expect("pool")
}

struct Cached {
    model: Model,
    pool: SamplePool,
    build: Duration,
}

fn cached(cell: &'static OnceLock<Cached>, spec: fn() -> ModelSpec, chains: usize, n_per_chain: usize, seed: u64) -> &'static Cached {
    cell.get_or_init(|| {
        let start = Instant::now();
        let model = Model::new(spec()).unwrap();
        let pool = build_pool(&model, chains, n_per_chain, seed);
        Cached { model, pool, build: start.elapsed() }
    })
}

/// Reference model, 10^6 records.
fn reference_small() -> &'static Cached {
    static CELL: OnceLock<Cached> = OnceLock::new();
    cached(&CELL, reference_spec, 4, 250_000, 11)
}

/// Two independent coordinates, 10^7 records.
fn two_block() -> &'static Cached {
    static CELL: OnceLock<Cached> = OnceLock::new();
    cached(&CELL, || pair_spec(Coupling::Independent), 4, 2_500_000, 13)
}

fn rel(a: f64, b: f64) -> f64 {
    if a == b {
        0.0
    } else {
        (a - b).abs() / b.abs().max(f64::MIN_POSITIVE)
    }
}

#[test]
fn criterion_01_tail_index_oracle() {
    let _g = serial();
    let start = Instant::now();
    let tp = Model::new(reference_spec()).unwrap();
    let ln = Model::new(ModelSpec::log_normal(-0.5, 1.0, ScalarLaw::Exp { rate: 1.0 })).unwrap();
    let a_tp = moments::solve_alpha(&tp, 0, 1e-12, Method::ClosedForm).unwrap().alpha;
    let a_ln = moments::solve_alpha(&ln, 0, 1e-12, Method::ClosedForm).unwrap().alpha;
    let elapsed = start.elapsed();
    let pass = (a_tp - 2.0).abs() <= 1e-8 && (a_ln - 1.0).abs() <= 1e-8 && elapsed < Duration::from_secs(1);
    verdict(1, "tail-index oracle", pass, elapsed, &format!("two-point alpha={a_tp:.12}, log-normal alpha={a_ln:.12}"));
}

#[test]
fn criterion_02_marginal_regular_variation() {
    let _g = serial();
    let start = Instant::now();
    let c = reference_small();
    let positive: Vec<f64> = c.pool.x(0).iter().copied().filter(|&v| v > 0.0).collect();
    let k = (c.pool.len() as f64).powf(0.6) as usize;
    let hill = tails::hill_estimate(&positive, k).unwrap();
    let marginal = tails::empirical_tail_constant(&c.pool, 0, 2.0, &Ladder::default()).unwrap();
    let elapsed = start.elapsed() + c.build;
    let hill_err = rel(hill.alpha.value, 2.0);
    let top: Vec<String> = marginal.plus[marginal.plus.len() - 3..]
        .iter()
        .map(|r| format!("[{:.3},{:.3}]", r.estimate.ci_lo, r.estimate.ci_hi))
        .collect();
    let pass = hill_err <= 0.15 && marginal.converged_plus && elapsed < Duration::from_secs(120);
    verdict(
        2,
        "marginal regular variation",
        pass,
        elapsed,
        &format!("hill(k={k})={:.4} rel.err={hill_err:.3}; top-three t^a P(X>t) CIs {}", hill.alpha.value, top.join(" ")),
    );
}

#[test]
fn criterion_03_goldie_cross_validation() {
    let _g = serial();
    let start = Instant::now();
    let model = Model::new(reference_spec()).unwrap();
    let pool = build_pool(&model, 4, 2_500_000, 17);
    let m = moments::goldie_mean(&model, 0, 2.0, Method::ClosedForm).unwrap().mean.value();
    let goldie = tails::goldie_constant(&pool, 0, 2.0, m).unwrap();
    let marginal = tails::empirical_tail_constant(&pool, 0, 2.0, &Ladder::default()).unwrap();
    let empirical = marginal.c_total();
    drop(pool);
    let elapsed = start.elapsed();
    let agreement = rel(goldie.total.value, empirical.value);
    let pass = agreement <= 0.20 && elapsed < Duration::from_secs(600);
    verdict(
        3,
        "Goldie cross-validation",
        pass,
        elapsed,
        &format!(
            "goldie={:.4} [{:.4},{:.4}] empirical top rung={:.4} [{:.4},{:.4}] rel.diff={agreement:.3}",
            goldie.total.value, goldie.total.ci_lo, goldie.total.ci_hi, empirical.value, empirical.ci_lo, empirical.ci_hi
        ),
    );
}

/// Largest `log10 |x_j|` drawn, leaving room for dilations by `t ≤ 10^2`
/// with `α_j ≥ 0.2`.
const MAX_LOG10_X: f64 = 290.0;

/// Coordinate with log-uniform magnitude. With `near_guard` the power
/// `|x_j|^{α_j}` sits around `10^{200}`, where the norm switches to log
/// space.
fn random_coord(rng: &mut impl Rng, a: f64, near_guard: bool) -> f64 {
    let log10_pow = if near_guard { rng.random_range(190.0..210.0) } else { rng.random_range(-6.0..6.0) };
    let m = 10f64.powf((log10_pow / a).min(MAX_LOG10_X));
    if rng.random::<bool>() {
        m
    } else {
        -m
    }
}

fn random_case(rng: &mut impl Rng, near_guard: bool) -> (AlphaNorm, Vec<f64>) {
    let d = rng.random_range(1..=5);
    // Below 0.75 a power of 10^{210} needs |x_j| beyond f64 range, and
    // mixing it with capped coordinates puts angle components near 10^{-760}.
    let lo = if near_guard { 0.75 } else { 0.2 };
    let alphas: Vec<f64> = (0..d).map(|_| rng.random_range(lo..5.0)).collect();
    let x = alphas.iter().map(|&a| random_coord(rng, a, near_guard)).collect();
    (AlphaNorm::new(alphas).unwrap(), x)
}

fn max_rel(u: &[f64], v: &[f64]) -> f64 {
    u.iter().zip(v).map(|(&a, &b)| rel(a, b)).fold(0.0, f64::max)
}

#[test]
fn criterion_04_geometry_invariants() {
    let _g = serial();
    let start = Instant::now();
    const CASES: usize = 1_000_000;
    let seq = SeedSequence::new(19).derive("geometry");
    // worst error per invariant, bulk and near-guard separately
    let mut worst = [[0.0f64; 2]; 4];
    let mut subadd_violations = 0usize;
    let mut rng = seq.stream(0);
    for case in 0..CASES {
        let near = case % 10 == 0;
        let g = near as usize;
        let (norm, x) = random_case(&mut rng, near);
        let span = if near { 1.0 } else { 3.0 };
        let t = 10f64.powf(rng.random_range(-span..span));
        let s = 10f64.powf(rng.random_range(-span..span));

        let homog = rel(norm.norm(&norm.dilate(t, &x)), t * norm.norm(&x));
        worst[0][g] = worst[0][g].max(homog);

        let (r, omega) = norm.polar(&x).unwrap();
        let round = max_rel(&norm.unpolar(r, &omega), &x).max(rel(norm.norm(&omega), 1.0));
        worst[1][g] = worst[1][g].max(round);

        let group = max_rel(&norm.dilate(s, &norm.dilate(t, &x)), &norm.dilate(s * t, &x));
        worst[2][g] = worst[2][g].max(group);

        let y: Vec<f64> = norm.alphas().iter().map(|&a| random_coord(&mut rng, a, near)).collect();
        let sum: Vec<f64> = x.iter().zip(&y).map(|(a, b)| a + b).collect();
        let lhs = norm.norm(&sum);
        let rhs = norm.c_alpha() * (norm.norm(&x) + norm.norm(&y));
        let excess = if lhs > rhs { rel(lhs, rhs) } else { 0.0 };
        worst[3][g] = worst[3][g].max(excess);
        if excess > if near { 1e-9 } else { 1e-12 } {
            subadd_violations += 1;
        }
    }
    let elapsed = start.elapsed();
    let ok = worst.iter().all(|w| w[0] <= 1e-12 && w[1] <= 1e-9);
    let pass = ok && subadd_violations == 0 && elapsed < Duration::from_secs(30);
    verdict(
        4,
        "geometry invariants",
        pass,
        elapsed,
        &format!(
            "{CASES} cases; worst rel.err bulk/near-guard: homogeneity {:.1e}/{:.1e}, polar {:.1e}/{:.1e}, group {:.1e}/{:.1e}, subadditivity excess {:.1e}/{:.1e}",
            worst[0][0], worst[0][1], worst[1][0], worst[1][1], worst[2][0], worst[2][1], worst[3][0], worst[3][1]
        ),
    );
}

#[test]
fn criterion_05_block_detection() {
    let _g = serial();
    let start = Instant::now();
    let model = Model::new(ModelSpec {
        d: 3,
        family: Family::CccGarch {
            a: vec![0.4, 0.4, 0.3],
            b: vec![0.5, 0.5, 0.6],
            correlation: Some(vec![1.0, 1.0, 0.0, 1.0, 1.0, 0.0, 0.0, 0.0, 1.0]),
        },
        b_law: BSpec::iid(ScalarLaw::Exp { rate: 1.0 }),
        sigma_margin: 0.1,
    })
    .unwrap();
    let batch = CoeffBatch::draw(&model, 1_000_000, &SeedSequence::new(23).derive("blocks"));
    let profile = TailProfile::compute(&model, &batch, &ProfileOptions::default()).unwrap();
    let alphas = profile.alpha.clone();
    let partition = blocks::detect_blocks_on(&model, &alphas, &batch, blocks::DEFAULT_TOL_REL).unwrap();
    let k12 = moments::cross_kappa(&model, 0, 1, alphas[0], alphas[1], 0.5, Method::Auto(&batch)).unwrap();
    let k13 = moments::cross_kappa(&model, 0, 2, alphas[0], alphas[2], 0.5, Method::Auto(&batch)).unwrap();
    let elapsed = start.elapsed();
    let pass = partition.classes == vec![vec![0, 1], vec![2]]
        && (k12.value() - 1.0).abs() <= 1e-3
        && k13.estimate.ci_hi < 1.0
        && elapsed < Duration::from_secs(60);
    verdict(
        5,
        "block detection",
        pass,
        elapsed,
        &format!(
            "alphas={:.4?} classes={:?} (0-based) cross(1,2)={:.6} cross(1,3)={:.4} ci_hi={:.4}",
            alphas,
            partition.classes,
            k12.value(),
            k13.value(),
            k13.estimate.ci_hi
        ),
    );
}

/// Joint ladder in `|x|_α` units: powers of 4 from 16 up to the last rung
/// with at least 50 joint exceedances. Ratios of 4 keep `t^{1/2}` on one
/// phase of the log-periodic oscillation of a lattice model with span
/// `log 2`.
fn joint_ladder(pool: &SamplePool) -> independence::JointLadder {
    let candidates: Vec<f64> = (2..=12).map(|k| 4f64.powi(k)).collect();
    let probe = independence::joint_exceedance(pool, 0, 1, (2.0, 2.0), (1.0, 1.0), &candidates).unwrap();
    let ladder: Vec<f64> =
        probe.rungs.iter().take_while(|r| r.count >= tails::MIN_TOP_EXCEEDANCES).map(|r| r.t).collect();
    independence::joint_exceedance(pool, 0, 1, (2.0, 2.0), (1.0, 1.0), &ladder).unwrap()
}

fn two_block_partition(c: &Cached) -> BlockPartition {
    blocks::detect_blocks(&c.model, &[2.0, 2.0], 200_000, blocks::DEFAULT_TOL_REL, &SeedSequence::new(29)).unwrap()
}

#[test]
fn criterion_06_asymptotic_independence() {
    let _g = serial();
    let start = Instant::now();
    let c = two_block();
    let partition = two_block_partition(c);
    let joint = joint_ladder(&c.pool);
    let single = tails::empirical_tail_constant(&c.pool, 0, 2.0, &Ladder::default()).unwrap().c_total();
    let contrast_model = Model::new(pair_spec(Coupling::Comonotone)).unwrap();
    let contrast_pool = build_pool(&contrast_model, 4, 2_500_000, 31);
    let contrast = joint_ladder(&contrast_pool);
    drop(contrast_pool);
    let elapsed = start.elapsed() + c.build;
    let top = joint.top().normalized.value;
    let pass = partition.len() == 2
        && joint.decaying
        && top < 0.25 * single.value
        && contrast.flat()
        && elapsed < Duration::from_secs(600);
    let fmt = |l: &independence::JointLadder| {
        l.rungs.iter().map(|r| format!("t={}:{:.4}({})", r.t, r.normalized.value, r.count)).collect::<Vec<_>>().join(" ")
    };
    verdict(
        6,
        "asymptotic independence",
        pass,
        elapsed,
        &format!(
            "classes={:?}; two-block tP: {} (single-coordinate limit {:.4}); comonotone tP: {} flat={}",
            partition.classes,
            fmt(&joint),
            single.value,
            fmt(&contrast),
            contrast.flat()
        ),
    );
}

#[test]
fn criterion_07_block_sum_identity() {
    let _g = serial();
    let start = Instant::now();
    let c = two_block();
    let partition = two_block_partition(c);
    let norm = AlphaNorm::new(vec![2.0, 2.0]).unwrap();
    let bt = tails::block_tail_constant(&c.pool, &partition, &norm, &Ladder::default()).unwrap();
    let elapsed = start.elapsed() + c.build;
    let gap = (bt.c_inf.value - bt.block_sum).abs();
    verdict(
        7,
        "block-sum identity",
        bt.consistent,
        elapsed,
        &format!(
            "c_inf={:.4} c_block={:?} sum={:.4} |gap|={gap:.4} combined half-width={:.4}",
            bt.c_inf.value,
            bt.c_block.iter().map(|e| (e.value * 1e4).round() / 1e4).collect::<Vec<_>>(),
            bt.block_sum,
            bt.combined_half_width
        ),
    );
}

#[test]
fn criterion_08_spectral_concentration() {
    let _g = serial();
    let start = Instant::now();
    let c = two_block();
    let partition = two_block_partition(c);
    let norm = AlphaNorm::new(vec![2.0, 2.0]).unwrap();
    let est = tails::spectral_measure(&c.pool, &partition, &norm, &Ladder::default(), tails::DEFAULT_BINS, tails::DEFAULT_EPS)
        .unwrap();
    let elapsed = start.elapsed() + c.build;
    let masses: Vec<f64> = est.rungs.iter().map(|r| r.block_mass_total.value).collect();
    let top = masses.last().copied().unwrap_or(0.0);
    let pass = top >= 0.9 && est.block_mass_nondecreasing();
    verdict(8, "spectral concentration", pass, elapsed, &format!("block mass by rung {masses:.4?}, dropped {:?}", est.dropped));
}

#[test]
fn criterion_09_moment_dichotomy() {
    let _g = serial();
    let start = Instant::now();
    let c = reference_small();
    let half = tails::moment_estimate(&c.pool, 0, 1.0).unwrap();
    let double = tails::moment_estimate(&c.pool, 0, 4.0).unwrap();
    let elapsed = start.elapsed() + c.build;
    let pass = half.stable && !double.stable && elapsed < Duration::from_secs(60);
    verdict(
        9,
        "moment dichotomy",
        pass,
        elapsed,
        &format!(
            "s=alpha/2: change {:.4} stable={}; s=2alpha: change {:.4} stable={}",
            half.relative_change, half.stable, double.relative_change, double.stable
        ),
    );
}

#[test]
fn criterion_10_subprobability_and_gamma0() {
    let _g = serial();
    let start = Instant::now();
    let model = Model::new(pair_spec(Coupling::Independent)).unwrap();
    let batch = CoeffBatch::draw(&model, 1_000_000, &SeedSequence::new(37).derive("gamma"));
    let cross = moments::cross_kappa(&model, 0, 1, 2.0, 2.0, 0.5, Method::ClosedForm).unwrap();
    let bound = independence::tau_gamma_bound(
        &model,
        0,
        1,
        (2.0, 2.0),
        &TauSpec::Log { beta: 1.0 },
        0.5,
        &independence::default_gamma_grid(),
        &batch,
    )
    .unwrap();
    let elapsed = start.elapsed();
    let pass = (cross.value() - 0.64).abs() <= 1e-3 && bound.gamma0 > 0.0 && elapsed < Duration::from_secs(60);
    verdict(
        10,
        "subprobability and gamma0",
        pass,
        elapsed,
        &format!("cross_kappa(0.5)={:.6} gamma0={:.4} (log tau, beta=1)", cross.value(), bound.gamma0),
    );
}

const REPRO_CONFIG: &str = r#"{
    "model": {"d": 2, "family": "TwoPoint", "p": [0.2, 0.2], "up": [2.0, 2.0], "down": [0.5, 0.5],
              "b_law": {"laws": [{"kind": "Exp", "rate": 1.0}]}},
    "seed": 41,
    "pipeline": [
        {"stage": "solve-alpha", "n": 20000},
        {"stage": "simulate", "chains": 3, "n_per_chain": 40000},
        {"stage": "blocks", "n": 20000},
        {"stage": "tails", "ladder": {"kind": "quantiles", "levels": [0.9, 0.95, 0.99, 0.995]}},
        {"stage": "spectral", "ladder": {"kind": "quantiles", "levels": [0.9, 0.95, 0.99]}, "bins": 8},
        {"stage": "independence", "ladder": {"kind": "thresholds", "values": [1.0, 4.0, 16.0]}, "n": 20000},
        {"stage": "report"}
    ]
}"#;

/// Every file except the manifest, which records the wall clock and the
/// worker count.
fn outputs(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<(String, Vec<u8>)> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.file_name().unwrap() != cli::MANIFEST)
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&p).unwrap()))
        .collect();
    files.sort();
    files
}

#[test]
fn criterion_11_reproducibility() {
    let _g = serial();
    let start = Instant::now();
    let config = RunConfig::from_json(REPRO_CONFIG).unwrap();
    let dirs: Vec<tempfile::TempDir> = (0..3).map(|_| tempfile::tempdir().unwrap()).collect();
    for (dir, workers) in dirs.iter().zip([Some(1), Some(1), Some(8)]) {
        let o = Overrides { out: Some(dir.path().to_path_buf()), workers, ..Default::default() };
        cli::run(&config, Command::Run, &o).unwrap();
    }
    let runs: Vec<_> = dirs.iter().map(|d| outputs(d.path())).collect();
    let elapsed = start.elapsed();
    let names: Vec<&str> = runs[0].iter().map(|(n, _)| n.as_str()).collect();
    let pass = runs[0].len() > 5 && runs[0] == runs[1] && runs[0] == runs[2];
    verdict(
        11,
        "reproducibility",
        pass,
        elapsed,
        &format!("{} files compared across two 1-worker runs and one 8-worker run: {}", names.len(), names.join(", ")),
    );
}
