//! Built-in benchmark cohorts.

use alloc::string::String;
use alloc::vec::Vec;

use super::{CohortSpec, SubjectSpec, SystemParams, DEFAULT_TRANSIENT};

/// Names accepted by [`by_name`].
pub const NAMES: [&str; 6] = [
    "lorenz63-grid64",
    "lorenz63-rho10",
    "lorenz96-f20",
    "roessler-c10",
    "multi-system",
    "lorenz63-regimes",
];

pub const DT: f64 = 0.01;
pub const T_MAX: usize = 1000;
pub const NOISE_FRACTION: f64 = 0.05;

/// `n` evenly spaced values from `lo` to `hi` inclusive.
pub fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    match n {
        0 => Vec::new(),
        1 => alloc::vec![lo],
        _ => (0..n).map(|k| lo + (hi - lo) * k as f64 / (n - 1) as f64).collect(),
    }
}

fn spec(name: &str, subjects: Vec<SubjectSpec>, seed: u64) -> CohortSpec {
    CohortSpec {
        name: String::from(name),
        subjects,
        dt: DT,
        transient_steps: DEFAULT_TRANSIENT,
        noise_fraction: NOISE_FRACTION,
        seed,
    }
}

fn subject(system: SystemParams, gt_params: Vec<f64>, label: Option<i64>) -> SubjectSpec {
    SubjectSpec {
        system,
        t_max: T_MAX,
        gt_params,
        label,
    }
}

fn lorenz(sigma: f64, rho: f64, beta: f64) -> SystemParams {
    SystemParams::Lorenz63 { sigma, rho, beta }
}

/// Lorenz-63 over ρ ∈ {21, 51, 81, 111} × σ ∈ {8, …, 11} × β ∈ {1, …, 4};
/// gt_params are `[σ, ρ, β]`.
pub fn lorenz63_grid64(seed: u64) -> CohortSpec {
    let mut subjects = Vec::with_capacity(64);
    for rho in [21.0, 51.0, 81.0, 111.0] {
        for sigma in [8.0, 9.0, 10.0, 11.0] {
            for beta in [1.0, 2.0, 3.0, 4.0] {
                subjects.push(subject(lorenz(sigma, rho, beta), alloc::vec![sigma, rho, beta], None));
            }
        }
    }
    spec("lorenz63-grid64", subjects, seed)
}

/// Lorenz-63 with `σ = 10`, `β = 8/3` and the given ρ values.
pub fn lorenz63_rho(rhos: &[f64], seed: u64) -> CohortSpec {
    let subjects = rhos
        .iter()
        .map(|&rho| subject(lorenz(10.0, rho, 8.0 / 3.0), alloc::vec![rho], None))
        .collect();
    spec("lorenz63-rho", subjects, seed)
}

/// Ten Lorenz-63 subjects with ρ evenly spaced over [28, 80].
pub fn lorenz63_rho10(seed: u64) -> CohortSpec {
    CohortSpec {
        name: String::from("lorenz63-rho10"),
        ..lorenz63_rho(&linspace(28.0, 80.0, 10), seed)
    }
}

/// Ten-dimensional Lorenz-96 with F ∈ {1, 11, …, 191}.
pub fn lorenz96_f20(seed: u64) -> CohortSpec {
    let subjects = (0..20)
        .map(|k| {
            let forcing = 1.0 + 10.0 * k as f64;
            subject(SystemParams::Lorenz96 { n_dims: 10, forcing }, alloc::vec![forcing], None)
        })
        .collect();
    spec("lorenz96-f20", subjects, seed)
}

/// Rössler with `a = b = 0.2` and c evenly spaced over [3.8, 4.8].
pub fn roessler_c10(seed: u64) -> CohortSpec {
    let subjects = linspace(3.8, 4.8, 10)
        .into_iter()
        .map(|c| subject(SystemParams::Rossler { a: 0.2, b: 0.2, c }, alloc::vec![c], None))
        .collect();
    spec("roessler-c10", subjects, seed)
}

/// Ten subjects each of Lorenz-63 (ρ over [28, 80]), Rössler (c over
/// [3.8, 4.8]) and Chua (α over [8.4, 9.4]); labels 0, 1, 2 by system.
pub fn multi_system(seed: u64) -> CohortSpec {
    let mut subjects = Vec::with_capacity(30);
    for rho in linspace(28.0, 80.0, 10) {
        subjects.push(subject(lorenz(10.0, rho, 8.0 / 3.0), alloc::vec![rho], Some(0)));
    }
    for c in linspace(3.8, 4.8, 10) {
        subjects.push(subject(SystemParams::Rossler { a: 0.2, b: 0.2, c }, alloc::vec![c], Some(1)));
    }
    for alpha in linspace(8.4, 9.4, 10) {
        let SystemParams::Chua { beta, m0, m1, .. } = SystemParams::chua_standard() else {
            unreachable!()
        };
        subjects.push(subject(SystemParams::Chua { alpha, beta, m0, m1 }, alloc::vec![alpha], Some(2)));
    }
    spec("multi-system", subjects, seed)
}

/// Grid points of [`lorenz63_grid64`] settling on a limit cycle (largest
/// Lyapunov exponent ≈ 0), as `(σ, ρ, β)`.
pub const LIMIT_CYCLE_SETTINGS: [(f64, f64, f64); 5] = [
    (8.0, 111.0, 3.0),
    (8.0, 111.0, 4.0),
    (9.0, 111.0, 3.0),
    (9.0, 111.0, 4.0),
    (11.0, 111.0, 4.0),
];

/// Grid points with a clearly positive largest Lyapunov exponent.
pub const CHAOTIC_SETTINGS: [(f64, f64, f64); 5] = [
    (8.0, 51.0, 2.0),
    (9.0, 51.0, 2.0),
    (10.0, 51.0, 3.0),
    (11.0, 51.0, 3.0),
    (9.0, 51.0, 4.0),
];

/// Five limit-cycle and five chaotic Lorenz-63 settings from the 64-point
/// grid; label 0 marks limit cycles, 1 chaos; gt_params are `[σ, ρ, β]`.
pub fn lorenz63_regimes(seed: u64) -> CohortSpec {
    let subjects = LIMIT_CYCLE_SETTINGS
        .iter()
        .map(|s| (s, 0))
        .chain(CHAOTIC_SETTINGS.iter().map(|s| (s, 1)))
        .map(|(&(sigma, rho, beta), label)| {
            subject(lorenz(sigma, rho, beta), alloc::vec![sigma, rho, beta], Some(label))
        })
        .collect();
    spec("lorenz63-regimes", subjects, seed)
}

/// Preset by name.
pub fn by_name(name: &str, seed: u64) -> Option<CohortSpec> {
    Some(match name {
        "lorenz63-grid64" => lorenz63_grid64(seed),
        "lorenz63-rho10" => lorenz63_rho10(seed),
        "lorenz96-f20" => lorenz96_f20(seed),
        "roessler-c10" => roessler_c10(seed),
        "multi-system" => multi_system(seed),
        "lorenz63-regimes" => lorenz63_regimes(seed),
        _ => return None,
    })
}
