//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Quantitative criteria run on the real datasets (`UAP_DATA_DIR`, default
//! `/root/data`) with models from the zoo cache (`JACGUARD_CACHE`, default
//! `target/jacguard-cache`); missing models are trained first, which takes hours
//! on a CPU. Criteria listed in `KNOWN_FAILURES` are reported but do not fail
//! the run; any other failure does.

use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use jacguard::attacks::{
    epsilon_sweep, evaluate_tsr, evaluate_uer, sgd_uap_targeted, sgd_uap_with, AttackConfig, AttackKind,
    DEFAULT_EPS_GRID,
};
use jacguard::data::{
    balanced_subset, encode_idx_images, encode_idx_labels, parse_idx_images, parse_idx_labels, read_idx_images,
    read_idx_labels, write_idx_images, write_idx_labels, Dataset, DatasetName, Split,
};
use jacguard::jacobian::{frobenius_sq_estimate_from, jacobian_exact, prop1_bound_check, stacked_bound_check};
use jacguard::linalg::{power_iteration, svd, NormOrder};
use jacguard::nn::{build_lenet, encode_checkpoint, softmax_cross_entropy, Network};
use jacguard::training::{joint_loss, predict, train, JrMode, TrainConfig};
use jacguard::{RngStream, Tensor};
use jacguard_cli::config::ExperimentConfig;
use jacguard_cli::reproduce::{measure_dataset, median, render, DatasetBlock};
use jacguard_cli::zoo::{ensure_model, ModelSpec, Variant};

/// Criteria expected to fail, with the reason recorded in the project notes.
const KNOWN_FAILURES: &[u32] = &[10];

const SEEDS: [u64; 3] = [1, 2, 3];
const JR: f64 = 0.05;

// Criterion 1
const MNIST_MIN_ACC: f64 = 98.6;
const FASHION_MIN_ACC: f64 = 89.5;
// Criterion 2
const JR_ACC_GAP: f64 = 0.5;
// Criterion 3
const MNIST_STD_MIN_UER: f64 = 70.0;
const MNIST_JR_MAX_UER: f64 = 35.0;
const MNIST_MIN_UER_RATIO: f64 = 2.0;
// Criterion 4
const FASHION_STD_MIN_UER: f64 = 75.0;
const FASHION_JR_MAX_UER: f64 = 45.0;
// Criterion 5
const MNIST_STD_MIN_TSR: f64 = 70.0;
const MNIST_JR_MAX_TSR: f64 = 35.0;
// Criterion 6
const UAT_ERROR_FACTOR: (f64, f64) = (1.5, 3.0);
const JR_UAT_UER_SLACK: f64 = 5.0;
// Criterion 7
const MNIST_STD_SIM: (f64, f64) = (0.45, 0.70);
const MNIST_JR_SIM: (f64, f64) = (0.08, 0.30);
const FASHION_STD_SIM: (f64, f64) = (0.35, 0.60);
const FASHION_JR_SIM: (f64, f64) = (0.03, 0.25);
const MIN_SIM_GAP: f64 = 0.2;
// Criterion 8
const GRAD_TOL: f64 = 1e-4;
const JOINT_GRAD_TOL: f64 = 1e-3;
// Criterion 9
const CS_SLACK: f64 = 1e-10;
const CS_EQUALITY: f64 = 1e-8;
// Criterion 10
const STACKED_EQUALITY: f64 = 1e-10;
// Criterion 11
const SVD_TOL: f64 = 1e-8;
const POWER_TOL: f64 = 1e-6;
// Criterion 12
const ESTIMATOR_DRAWS: usize = 10_000;
const ESTIMATOR_TOL: f64 = 0.02;

struct Report {
    lines: Vec<(u32, bool, String)>,
}

impl Report {
    fn record(&mut self, id: u32, name: &str, pass: bool, detail: String) {
        let tag = if pass { "PASS" } else { "FAIL" };
        let line = format!("[{tag}] {id:>2} {name}: {detail}");
        println!("{line}");
        self.lines.push((id, pass, line));
    }
}

fn data_root() -> PathBuf {
    std::env::var_os("UAP_DATA_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| "/root/data".into())
}

fn cache_dir() -> PathBuf {
    std::env::var_os("JACGUARD_CACHE")
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../target/jacguard-cache"))
}

fn experiment() -> ExperimentConfig {
    ExperimentConfig {
        data_dir: Some(data_root()),
        models_dir: cache_dir().join("models"),
        seeds: Some(SEEDS.to_vec()),
        train_missing: true,
        ..ExperimentConfig::default()
    }
}

fn within(x: f64, (lo, hi): (f64, f64)) -> bool {
    (lo..=hi).contains(&x)
}

fn seeds_of(block: &DatasetBlock, model: usize, f: impl Fn(&jacguard_cli::reproduce::SeedResult) -> f64) -> String {
    let v: Vec<String> = block.results[model].iter().map(|r| format!("{:.2}", f(r))).collect();
    v.join("/")
}

fn quantitative(rep: &mut Report) -> anyhow::Result<()> {
    let cfg = experiment();
    let t = Instant::now();
    let mnist = measure_dataset(&cfg, DatasetName::Mnist)?;
    let fashion = measure_dataset(&cfg, DatasetName::FashionMnist)?;
    let blocks = [mnist.clone(), fashion.clone()];
    let cells: Vec<_> = blocks.iter().flat_map(jacguard_cli::reproduce::cells).collect();
    let table = render(&blocks, &cells);
    println!("{table}");
    let out = cache_dir().join("acceptance");
    std::fs::create_dir_all(&out)?;
    std::fs::write(out.join("table1.txt"), &table)?;
    eprintln!("table measured in {:.0}s", t.elapsed().as_secs_f64());

    let acc = |b: &DatasetBlock, m: usize| 100.0 - b.median(m, 0);
    let (m_std, f_std) = (acc(&mnist, 0), acc(&fashion, 0));
    rep.record(
        1,
        "clean accuracy, standard LeNet",
        m_std >= MNIST_MIN_ACC && f_std >= FASHION_MIN_ACC,
        format!(
            "mnist {m_std:.2}% (>= {MNIST_MIN_ACC}; seeds {}), fashion {f_std:.2}% (>= {FASHION_MIN_ACC}; seeds {})",
            seeds_of(&mnist, 0, |r| 100.0 - r.test_error),
            seeds_of(&fashion, 0, |r| 100.0 - r.test_error)
        ),
    );

    let (m_jr, f_jr) = (acc(&mnist, 2), acc(&fashion, 2));
    rep.record(
        2,
        "JR clean accuracy within 0.5 points of standard",
        (m_jr - m_std).abs() <= JR_ACC_GAP && (f_jr - f_std).abs() <= JR_ACC_GAP,
        format!("mnist {m_jr:.2}% vs {m_std:.2}%, fashion {f_jr:.2}% vs {f_std:.2}%"),
    );

    let (ms, mu, mj) = (mnist.median(0, 1), mnist.median(1, 1), mnist.median(2, 1));
    rep.record(
        3,
        "untargeted UER, MNIST eps=0.2",
        ms >= MNIST_STD_MIN_UER && mj <= MNIST_JR_MAX_UER && ms / mj >= MNIST_MIN_UER_RATIO,
        format!(
            "standard {ms:.2}% (>= {MNIST_STD_MIN_UER}; seeds {}), JR {mj:.2}% (<= {MNIST_JR_MAX_UER}; seeds {}), ratio {:.2} (>= {MNIST_MIN_UER_RATIO})",
            seeds_of(&mnist, 0, |r| r.uer),
            seeds_of(&mnist, 2, |r| r.uer),
            ms / mj
        ),
    );

    let (fs, fu, fj) = (fashion.median(0, 1), fashion.median(1, 1), fashion.median(2, 1));
    rep.record(
        4,
        "untargeted UER, Fashion-MNIST eps=0.15",
        fs >= FASHION_STD_MIN_UER && fj <= FASHION_JR_MAX_UER,
        format!(
            "standard {fs:.2}% (>= {FASHION_STD_MIN_UER}; seeds {}), JR {fj:.2}% (<= {FASHION_JR_MAX_UER}; seeds {})",
            seeds_of(&fashion, 0, |r| r.uer),
            seeds_of(&fashion, 2, |r| r.uer)
        ),
    );

    let (ts, tj) = (mnist.median(0, 2), mnist.median(2, 2));
    rep.record(
        5,
        "mean targeted TSR, MNIST eps=0.2",
        ts >= MNIST_STD_MIN_TSR && tj <= MNIST_JR_MAX_TSR,
        format!("standard {ts:.2}% (>= {MNIST_STD_MIN_TSR}), JR {tj:.2}% (<= {MNIST_JR_MAX_TSR})"),
    );

    let m_factor = mnist.median(1, 0) / mnist.median(0, 0);
    let f_factor = fashion.median(1, 0) / fashion.median(0, 0);
    rep.record(
        6,
        "UAT baseline",
        within(m_factor, UAT_ERROR_FACTOR) && within(f_factor, UAT_ERROR_FACTOR) && mj <= mu + JR_UAT_UER_SLACK,
        format!(
            "error factor mnist {m_factor:.2} fashion {f_factor:.2} (in [{}, {}]), MNIST UER JR {mj:.2}% vs UAT {mu:.2}% (+{JR_UAT_UER_SLACK}); fashion UAT UER {fu:.2}%",
            UAT_ERROR_FACTOR.0, UAT_ERROR_FACTOR.1
        ),
    );

    let mut sim_ok = true;
    let mut detail = Vec::new();
    for (d, std_r, jr_r) in [
        (DatasetName::Mnist, MNIST_STD_SIM, MNIST_JR_SIM),
        (DatasetName::FashionMnist, FASHION_STD_SIM, FASHION_JR_SIM),
    ] {
        let dcfg = ExperimentConfig {
            dataset: Some(d),
            ..cfg.clone()
        };
        let test = Dataset::load(&data_root(), d, Split::Test)?;
        let (mut s_med, mut j_med, mut gaps) = (Vec::new(), Vec::new(), Vec::new());
        for seed in SEEDS {
            let s = ensure_model(&dcfg, &ModelSpec::new(d, Variant::Standard, seed))?;
            let j = ensure_model(&dcfg, &ModelSpec::new(d, Variant::Jr { lambda: JR }, seed))?;
            let (ss, _) = jacguard_cli::commands::jacsim(&dcfg, &s, &test, seed)?;
            let (js, _) = jacguard_cli::commands::jacsim(&dcfg, &j, &test, seed)?;
            gaps.push(ss.median - js.median);
            s_med.push(ss.median);
            j_med.push(js.median);
        }
        let (sm, jm) = (median(&s_med), median(&j_med));
        let min_gap = gaps.iter().cloned().fold(f64::INFINITY, f64::min);
        sim_ok &= within(sm, std_r) && within(jm, jr_r) && min_gap >= MIN_SIM_GAP;
        detail.push(format!(
            "{d} standard {sm:.3} (in [{}, {}]) JR {jm:.3} (in [{}, {}]) min gap {min_gap:.3}",
            std_r.0, std_r.1, jr_r.0, jr_r.1
        ));
    }
    rep.record(7, "Jacobian similarity medians", sim_ok, detail.join("; "));
    Ok(())
}

/// Max over coordinates of `|a - n| / max(|a|, |n|, floor)`.
fn max_rel(a: &[f64], n: &[f64], floor: f64) -> f64 {
    a.iter()
        .zip(n)
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(floor))
        .fold(0.0, f64::max)
}

fn pattern(net: &Network<f64>, x: &Tensor<f64>) -> Vec<u32> {
    let (_, tr) = net.forward(x).unwrap();
    net.activation_pattern(&tr)
}

fn gradient_oracle(rep: &mut Report) {
    let mut rng = RngStream::new(81);
    let mut net = build_lenet::<f64>([1, 28, 28], 10, &mut rng).unwrap();
    for p in net.params_mut() {
        if p.shape().len() == 1 {
            p.data_mut().iter_mut().for_each(|b| *b = rng.uniform_range(-0.1, 0.1));
        }
    }
    let x = Tensor::from_fn(&[3, 784], |_| rng.uniform());
    let y = vec![1usize, 4, 7];
    let h = 1e-6;
    let ce = |n: &Network<f64>, x: &Tensor<f64>| {
        let (l, _) = n.forward(x).unwrap();
        softmax_cross_entropy(&l, &y).unwrap().0
    };
    let (logits, trace) = net.forward(&x).unwrap();
    let (_, dl) = softmax_cross_entropy(&logits, &y).unwrap();
    let pgrads = net.backward_params(&trace, &dl).unwrap();
    let igrad = net.backward_input(&trace, &dl).unwrap();
    let base = pattern(&net, &x);

    // Input coordinates.
    let (mut an, mut nu) = (Vec::new(), Vec::new());
    for _ in 0..60 {
        let i = rng.index(x.len());
        let (mut xp, mut xm) = (x.clone(), x.clone());
        xp.data_mut()[i] += h;
        xm.data_mut()[i] -= h;
        if pattern(&net, &xp) != base || pattern(&net, &xm) != base {
            continue;
        }
        an.push(igrad.data()[i]);
        nu.push((ce(&net, &xp) - ce(&net, &xm)) / (2.0 * h));
    }
    let input_err = max_rel(&an, &nu, 1e-6);
    let n_input = an.len();

    // Parameter coordinates.
    let (mut an, mut nu) = (Vec::new(), Vec::new());
    let n_tensors = net.params().len();
    for _ in 0..80 {
        let t = rng.index(n_tensors);
        let i = rng.index(net.params()[t].len());
        let mut plus = net.clone();
        plus.params_mut()[t].data_mut()[i] += h;
        let mut minus = net.clone();
        minus.params_mut()[t].data_mut()[i] -= h;
        if pattern(&plus, &x) != base || pattern(&minus, &x) != base {
            continue;
        }
        an.push(pgrads.tensors[t].data()[i]);
        nu.push((ce(&plus, &x) - ce(&minus, &x)) / (2.0 * h));
    }
    let param_err = max_rel(&an, &nu, 1e-6);
    let n_param = an.len();

    // Joint loss with exact Jacobian penalty.
    let lambda = 0.3;
    let joint = |n: &Network<f64>| {
        joint_loss(n, &x, &y, lambda, JrMode::Exact, &mut RngStream::new(0))
            .unwrap()
            .0
            .total
    };
    let (_, jgrads) = joint_loss(&net, &x, &y, lambda, JrMode::Exact, &mut RngStream::new(0)).unwrap();
    let (mut an, mut nu) = (Vec::new(), Vec::new());
    for _ in 0..80 {
        let t = rng.index(n_tensors);
        let i = rng.index(net.params()[t].len());
        let mut plus = net.clone();
        plus.params_mut()[t].data_mut()[i] += h;
        let mut minus = net.clone();
        minus.params_mut()[t].data_mut()[i] -= h;
        if pattern(&plus, &x) != base || pattern(&minus, &x) != base {
            continue;
        }
        an.push(jgrads.tensors[t].data()[i]);
        nu.push((joint(&plus) - joint(&minus)) / (2.0 * h));
    }
    let joint_err = max_rel(&an, &nu, 1e-6);
    let n_joint = an.len();
    rep.record(
        8,
        "gradient oracle (f64 central differences)",
        input_err <= GRAD_TOL && param_err <= GRAD_TOL && joint_err <= JOINT_GRAD_TOL && n_input > 20 && n_param > 20 && n_joint > 20,
        format!(
            "max rel err inputs {input_err:.2e} ({n_input} coords), params {param_err:.2e} ({n_param}), joint loss {joint_err:.2e} ({n_joint}); tol {GRAD_TOL:e}/{JOINT_GRAD_TOL:e}"
        ),
    );
}

fn gaussian(rows: usize, cols: usize, rng: &mut RngStream) -> Tensor<f64> {
    Tensor::from_fn(&[rows, cols], |_| rng.normal())
}

/// Orthonormal columns by modified Gram-Schmidt.
fn orthonormal(rows: usize, cols: usize, rng: &mut RngStream) -> Vec<Vec<f64>> {
    let mut q: Vec<Vec<f64>> = Vec::new();
    while q.len() < cols {
        let mut v: Vec<f64> = (0..rows).map(|_| rng.normal()).collect();
        for u in &q {
            let d: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(u).for_each(|(a, b)| *a -= d * b);
        }
        let n = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        v.iter_mut().for_each(|a| *a /= n);
        q.push(v);
    }
    q
}

/// `Σₖ sₖ uₖ vₖᵀ`.
fn compose(u: &[Vec<f64>], s: &[f64], v: &[Vec<f64>]) -> Tensor<f64> {
    let (r, c) = (u[0].len(), v[0].len());
    Tensor::from_fn(&[r, c], |idx| {
        let (i, j) = (idx / c, idx % c);
        s.iter().enumerate().map(|(k, sk)| sk * u[k][i] * v[k][j]).sum()
    })
}

fn proposition_suite(rep: &mut Report) {
    let mut rng = RngStream::new(91);
    let mut worst_slack = f64::NEG_INFINITY;
    for _ in 0..1000 {
        let (r, c) = (1 + rng.index(10), 1 + rng.index(30));
        let a = gaussian(r, c, &mut rng);
        let b = gaussian(r, c, &mut rng);
        let inner: f64 = a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum();
        let na = a.data().iter().map(|x| x * x).sum::<f64>().sqrt();
        let nb = b.data().iter().map(|x| x * x).sum::<f64>().sqrt();
        let chk = prop1_bound_check(&a, &b).unwrap();
        assert!((chk.lhs - inner).abs() <= 1e-12 * (1.0 + inner.abs()));
        worst_slack = worst_slack.max(chk.lhs - (na * nb + CS_SLACK));
    }
    let mut worst_eq = 0.0f64;
    for _ in 0..100 {
        let (r, c) = (2 + rng.index(8), 2 + rng.index(8));
        let a = gaussian(r, c, &mut rng);
        let s = rng.uniform_range(0.1, 5.0);
        let chk = prop1_bound_check(&a, &a.scale(s)).unwrap();
        worst_eq = worst_eq.max((chk.ratio - 1.0).abs());
        let k = r.min(c);
        let u = orthonormal(r, k, &mut rng);
        let v = orthonormal(c, k, &mut rng);
        let sigma: Vec<f64> = (0..k).map(|_| rng.uniform_range(0.1, 3.0)).collect();
        let t = rng.uniform_range(0.2, 4.0);
        let scaled: Vec<f64> = sigma.iter().map(|x| x * t).collect();
        let chk = prop1_bound_check(&compose(&u, &sigma, &v), &compose(&u, &scaled, &v)).unwrap();
        worst_eq = worst_eq.max((chk.ratio - 1.0).abs());
    }
    rep.record(
        9,
        "Cauchy-Schwarz bound and equality cases",
        worst_slack <= 0.0 && worst_eq <= CS_EQUALITY,
        format!("1000 pairs, max <A,B> - (|A||B| + 1e-10) = {worst_slack:.3e}; equality cases max |ratio - 1| = {worst_eq:.2e}"),
    );
}

fn stacked_suite(rep: &mut Report) -> anyhow::Result<()> {
    let cfg = experiment();
    let test = Dataset::load(&data_root(), DatasetName::Mnist, Split::Test)?;
    let mut rng = RngStream::new(10);
    let mut holds = true;
    let (mut n1_err, mut dup_err, mut dup_pair_err) = (0.0f64, 0.0f64, 0.0f64);
    for variant in [Variant::Standard, Variant::Jr { lambda: JR }] {
        let model = ensure_model(
            &ExperimentConfig {
                dataset: Some(DatasetName::Mnist),
                ..cfg.clone()
            },
            &ModelSpec::new(DatasetName::Mnist, variant, 1),
        )?;
        let net = model.network.cast::<f64>();
        for n in [1usize, 2, 5, 10] {
            for _ in 0..5 {
                let idx: Vec<usize> = (0..n).map(|_| rng.index(test.len())).collect();
                let b = stacked_bound_check(&net, &test.batch::<f64>(&idx).0)?;
                holds &= b.lhs <= b.rhs * (1.0 + 1e-12) && b.pairwise <= b.rhs * (1.0 + 1e-12);
                if n == 1 {
                    n1_err = n1_err.max((b.lhs - b.rhs).abs() / b.rhs);
                }
            }
            if n > 1 {
                let i = rng.index(test.len());
                let b = stacked_bound_check(&net, &test.batch::<f64>(&vec![i; n]).0)?;
                dup_err = dup_err.max((b.lhs - b.rhs).abs() / b.rhs);
                dup_pair_err = dup_pair_err.max((b.pairwise - b.rhs).abs() / b.rhs);
            }
        }
    }
    rep.record(
        10,
        "stacked-Jacobian bound",
        holds && n1_err <= STACKED_EQUALITY && dup_err <= STACKED_EQUALITY,
        format!(
            "inequality holds: {holds}; N=1 rel gap {n1_err:.1e}; duplicated inputs rel gap {dup_err:.3} \
             (the stacked norm is sqrt(N)|J|, not N|J|); pairwise-sum form rel gap {dup_pair_err:.1e}"
        ),
    );
    Ok(())
}

fn jacobi_eigenvalues(mut a: Vec<Vec<f64>>) -> Vec<f64> {
    let n = a.len();
    for _ in 0..100 {
        let off: f64 = (0..n).flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j))).map(|(i, j)| a[i][j] * a[i][j]).sum();
        if off < 1e-30 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                if a[p][q].abs() < 1e-300 {
                    continue;
                }
                let theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (akp, akq) = (a[k][p], a[k][q]);
                    a[k][p] = c * akp - s * akq;
                    a[k][q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let (apk, aqk) = (a[p][k], a[q][k]);
                    a[p][k] = c * apk - s * aqk;
                    a[q][k] = s * apk + c * aqk;
                }
            }
        }
    }
    let mut ev: Vec<f64> = (0..n).map(|i| a[i][i]).collect();
    ev.sort_by(|x, y| y.total_cmp(x));
    ev
}

fn linalg_oracles(rep: &mut Report) {
    let mut rng = RngStream::new(111);
    let mut svd_err = 0.0f64;
    let mut power_err = 0.0f64;
    let mut corner_err = 0.0f64;
    for _ in 0..50 {
        let (r, c) = (2 + rng.index(12), 2 + rng.index(12));
        let m = gaussian(r, c, &mut rng);
        let s = svd(&m).unwrap();
        let gram: Vec<Vec<f64>> = (0..c)
            .map(|i| (0..c).map(|j| (0..r).map(|k| m.at(k, i) * m.at(k, j)).sum()).collect())
            .collect();
        let ev = jacobi_eigenvalues(gram);
        let scale = ev[0].max(1.0);
        for (k, sv) in s.sigma.iter().enumerate() {
            svd_err = svd_err.max((sv * sv - ev[k].max(0.0)).abs() / scale);
        }
        if s.sigma.len() < 2 || s.sigma[0] / s.sigma[1] > 1.01 {
            let p = power_iteration(&m, NormOrder::L2, NormOrder::L2, 20_000, 1e-15).unwrap();
            power_err = power_err.max((p.sigma - s.sigma[0]).abs() / s.sigma[0]);
        }
    }
    for _ in 0..300 {
        let (r, c) = (1 + rng.index(9), 1 + rng.index(4));
        let m = gaussian(r, c, &mut rng);
        let p = power_iteration(&m, NormOrder::LInf, NormOrder::L2, 100, 0.0).unwrap();
        let mut best = 0.0f64;
        for mask in 0..(1u32 << c) {
            let v: Vec<f64> = (0..c).map(|j| if mask >> j & 1 == 1 { 1.0 } else { -1.0 }).collect();
            let n: f64 = (0..r)
                .map(|i| (0..c).map(|j| m.at(i, j) * v[j]).sum::<f64>().powi(2))
                .sum::<f64>()
                .sqrt();
            best = best.max(n);
        }
        corner_err = corner_err.max((p.sigma - best).abs() / best);
    }
    rep.record(
        11,
        "linear-algebra oracles",
        svd_err <= SVD_TOL && power_err <= POWER_TOL && corner_err <= 1e-12,
        format!(
            "SVD vs Jacobi eigen {svd_err:.1e} (<= {SVD_TOL:e}), power vs SVD {power_err:.1e} (<= {POWER_TOL:e}), \
             p=inf vs corner enumeration {corner_err:.1e} over 300 matrices"
        ),
    );
}

fn estimator(rep: &mut Report) -> anyhow::Result<()> {
    let cfg = experiment();
    let test = Dataset::load(&data_root(), DatasetName::Mnist, Split::Test)?;
    let model = ensure_model(
        &ExperimentConfig {
            dataset: Some(DatasetName::Mnist),
            ..cfg
        },
        &ModelSpec::new(DatasetName::Mnist, Variant::Standard, 1),
    )?;
    let net = model.network.cast::<f64>();
    let mut rng = RngStream::new(12);
    let mut worst = 0.0f64;
    for i in [0usize, 1, 2] {
        let j = jacobian_exact(&net, &test.batch::<f64>(&[i]).0.into_data())?.matrix;
        let exact: f64 = j.data().iter().map(|x| x * x).sum();
        let mean = (0..ESTIMATOR_DRAWS)
            .map(|_| frobenius_sq_estimate_from(&j, 1, &mut rng).unwrap())
            .sum::<f64>()
            / ESTIMATOR_DRAWS as f64;
        worst = worst.max((mean - exact).abs() / exact);
    }
    rep.record(
        12,
        "projection estimator of |J|_F^2",
        worst <= ESTIMATOR_TOL,
        format!("mean of {ESTIMATOR_DRAWS} single-projection draws, worst rel err {worst:.4} over 3 inputs (<= {ESTIMATOR_TOL})"),
    );
    Ok(())
}

fn attack_invariants(rep: &mut Report) -> anyhow::Result<()> {
    let cfg = ExperimentConfig {
        dataset: Some(DatasetName::Mnist),
        ..experiment()
    };
    let root = data_root();
    let train_set = Dataset::load(&root, DatasetName::Mnist, Split::Train)?;
    let test = Dataset::load(&root, DatasetName::Mnist, Split::Test)?;
    let model = ensure_model(&cfg, &ModelSpec::new(DatasetName::Mnist, Variant::Standard, 1))?;
    let net = &model.network;

    let mut in_ball = true;
    let mut steps = 0;
    for (eps, target) in [(0.1, None), (0.2, None), (0.3, Some(5))] {
        let ac = AttackConfig {
            epsilon: eps,
            target_class: target,
            seed: 3,
            ..AttackConfig::default()
        };
        let bound = eps as f32;
        sgd_uap_with(net, &train_set, &ac, |_, d| {
            steps += 1;
            in_ball &= d.iter().all(|x| x.abs() <= bound);
        })?;
    }

    let zero = vec![0.0f32; test.image_len()];
    let clean = predict(net, &test, None, false)?;
    let clean_err = clean.iter().enumerate().filter(|&(i, &p)| p != test.label(i)).count() as f64 / test.len() as f64;
    let p0 = jacguard::attacks::sgd_uap_untargeted(
        net,
        &train_set,
        &AttackConfig {
            epsilon: 0.0,
            iterations: 5,
            ..AttackConfig::default()
        },
    )?;
    let mut exact = p0.delta == zero && evaluate_uer(net, &test, &p0.delta, true)? == clean_err;
    for c in [0usize, 6] {
        let p = sgd_uap_targeted(
            net,
            &train_set,
            &AttackConfig {
                epsilon: 0.0,
                iterations: 5,
                target_class: Some(c),
                ..AttackConfig::default()
            },
        )?;
        let frac = clean.iter().filter(|&&k| k == c).count() as f64 / test.len() as f64;
        exact &= evaluate_tsr(net, &test, &p.delta, c, true)? == frac;
    }

    let mut per_eps: Vec<Vec<f64>> = vec![Vec::new(); DEFAULT_EPS_GRID.len()];
    for seed in SEEDS {
        let m = ensure_model(&cfg, &ModelSpec::new(DatasetName::Mnist, Variant::Standard, seed))?;
        let rows = epsilon_sweep(
            &m.network,
            &train_set,
            &test,
            &DEFAULT_EPS_GRID,
            AttackKind::Untargeted,
            &AttackConfig {
                seed,
                ..AttackConfig::default()
            },
        )?;
        for (k, r) in rows.iter().enumerate() {
            per_eps[k].push(r.value);
        }
    }
    let medians: Vec<f64> = per_eps.iter().map(|v| median(v)).collect();
    let monotone = medians.windows(2).all(|w| w[1] >= w[0]);
    let curve: Vec<String> = DEFAULT_EPS_GRID
        .iter()
        .zip(&medians)
        .map(|(e, m)| format!("{e}:{:.1}%", 100.0 * m))
        .collect();
    rep.record(
        13,
        "attack invariants",
        in_ball && steps == 300 && exact && monotone,
        format!(
            "every iterate in ball: {in_ball} ({steps} steps); eps=0 gives clean metrics exactly: {exact}; \
             median UER over grid {} non-decreasing: {monotone}",
            curve.join(" ")
        ),
    );
    Ok(())
}

fn determinism(rep: &mut Report) -> anyhow::Result<()> {
    let root = data_root();
    let mut idx_ok = true;
    let tmp = tempfile::tempdir()?;
    for name in [DatasetName::Mnist, DatasetName::FashionMnist] {
        for split in [Split::Train, Split::Test] {
            let (img_path, lab_path) = Dataset::files(&root.join(name.as_str()), split);
            let raw_img = std::fs::read(&img_path)?;
            let raw_lab = std::fs::read(&lab_path)?;
            let images = parse_idx_images(&raw_img)?;
            let labels = parse_idx_labels(&raw_lab)?;
            idx_ok &= encode_idx_images(&images) == raw_img && encode_idx_labels(&labels) == raw_lab;
            let gz = tmp.path().join("x.gz");
            write_idx_images(&gz, &images)?;
            idx_ok &= read_idx_images(&gz)? == images;
            write_idx_labels(&gz, &labels)?;
            idx_ok &= read_idx_labels(&gz)? == labels;
        }
    }

    let train_set = Dataset::load(&root, DatasetName::Mnist, Split::Train)?;
    let mut r = RngStream::new(5);
    let small = balanced_subset(&train_set, 100, &mut r)?;
    let tc = TrainConfig {
        epochs: 1,
        lambda_jr: JR,
        seed: 9,
        ..TrainConfig::default()
    };
    let run = |threads: usize| -> anyhow::Result<(Vec<u8>, Vec<f32>)> {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build()?;
        pool.install(|| {
            let m = train::<f32>(&tc, &small, None)?;
            let ckpt = encode_checkpoint(&m.network, "determinism", serde_json::Value::Null)?;
            let p = jacguard::attacks::sgd_uap_untargeted(
                &m.network,
                &small,
                &AttackConfig {
                    iterations: 10,
                    seed: 2,
                    ..AttackConfig::default()
                },
            )?;
            Ok((ckpt, p.delta))
        })
    };
    let a = run(1)?;
    let b = run(1)?;
    let c = run(4)?;
    let rerun_ok = a == b && a == c;
    rep.record(
        14,
        "IDX round trip and deterministic reruns",
        idx_ok && rerun_ok,
        format!(
            "IDX encode/parse and gzip write/read bit-exact on all 4 files of both datasets: {idx_ok}; \
             checkpoint and UAP bytes identical across reruns and 1 vs 4 threads: {rerun_ok}"
        ),
    );
    Ok(())
}

fn main() -> ExitCode {
    let mut rep = Report { lines: Vec::new() };
    let data_ok = [DatasetName::Mnist, DatasetName::FashionMnist]
        .iter()
        .all(|d| data_root().join(d.as_str()).is_dir());
    gradient_oracle(&mut rep);
    proposition_suite(&mut rep);
    linalg_oracles(&mut rep);
    if data_ok {
        let steps: [(u32, fn(&mut Report) -> anyhow::Result<()>); 5] = [
            (10, stacked_suite),
            (12, estimator),
            (14, determinism),
            (13, attack_invariants),
            (1, quantitative),
        ];
        for (id, f) in steps {
            if let Err(e) = f(&mut rep) {
                rep.record(id, "error", false, format!("{e:#}"));
            }
        }
    } else {
        for id in [1, 2, 3, 4, 5, 6, 7, 10, 12, 13, 14] {
            rep.record(id, "needs MNIST and Fashion-MNIST", false, format!("no data under {}", data_root().display()));
        }
    }
    rep.lines.sort_by_key(|l| l.0);
    println!("\nacceptance summary");
    for (_, _, line) in &rep.lines {
        println!("{line}");
    }
    let unexpected: Vec<u32> = rep
        .lines
        .iter()
        .filter(|(id, pass, _)| !pass && !KNOWN_FAILURES.contains(id))
        .map(|l| l.0)
        .collect();
    let passed = rep.lines.iter().filter(|l| l.1).count();
    println!("{passed}/{} criteria pass; known failures {KNOWN_FAILURES:?}; unexpected failures {unexpected:?}", rep.lines.len());
    if unexpected.is_empty() {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
