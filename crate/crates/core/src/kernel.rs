//! Generalized robust loss, IRLS weights and the truncated partition
//! function.
//!
//! The loss family `rho(e; alpha, c)` interpolates between classical
//! M-estimator kernels through a single shape parameter `alpha ∈ (-inf, 2]`:
//! `alpha = 2` is plain least squares, `alpha = 1` is pseudo-Huber,
//! `alpha = 0` is Cauchy and `alpha -> -inf` approaches Welsch. The scale
//! `c` sets the residual magnitude at which downweighting kicks in.
//!
//! For likelihood-based shape estimation the loss is turned into a density
//! `exp(-rho(x; alpha, 1)) / Z(alpha)` over the truncated support
//! `[-tau, tau]`. The normalizer `Z(alpha)` has no closed form for general
//! `alpha` (and the untruncated integral diverges for `alpha <= 0`), so
//! `log Z` is evaluated by composite Simpson quadrature and cached per grid
//! node in a [`PartitionTable`].

use std::io::{BufRead, Write};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::OnceLock;

use crate::{invalid, Error, Result};

/// Width of the closed-form branch windows around `alpha = 2` and
/// `alpha = 0`. Inside these windows the limit expressions are used to
/// avoid cancellation in the general branch.
pub const BRANCH_EPS: f64 = 1e-9;

/// Default truncation bound for the partition integral, in whitened
/// residual units.
pub const DEFAULT_TAU: f64 = 10.0;

/// Default number of Simpson subintervals for the partition integral.
pub const DEFAULT_QUAD_NODES: usize = 2000;

/// Shape/scale pair parameterizing the generalized loss.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KernelParams {
    /// Shape parameter, dimensionless, `<= 2`.
    pub alpha: f64,
    /// Scale parameter in residual units, `> 0`.
    pub c: f64,
}

impl KernelParams {
    pub fn new(alpha: f64, c: f64) -> Result<Self> {
        let p = Self { alpha, c };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !self.alpha.is_finite() || self.alpha > 2.0 {
            return Err(invalid(format!(
                "kernel shape must be finite and <= 2, got {}",
                self.alpha
            )));
        }
        if !self.c.is_finite() || self.c <= 0.0 {
            return Err(invalid(format!(
                "kernel scale must be finite and > 0, got {}",
                self.c
            )));
        }
        Ok(())
    }
}

fn check_residual(e: f64) -> Result<()> {
    if !e.is_finite() {
        return Err(invalid(format!("residual magnitude must be finite, got {e}")));
    }
    Ok(())
}

/// Loss value `rho(e; alpha, c)`. Zero at `e = 0`, nondecreasing in `e`.
pub fn rho(e: f64, params: KernelParams) -> Result<f64> {
    params.validate()?;
    check_residual(e)?;
    Ok(rho_raw(e, params.alpha, params.c))
}

/// Derivative of the loss with respect to the residual magnitude.
pub fn drho_de(e: f64, params: KernelParams) -> Result<f64> {
    params.validate()?;
    check_residual(e)?;
    Ok(drho_raw(e, params.alpha, params.c))
}

/// IRLS weight `w(e) = rho'(e) / e`, with the analytic limit `1/c^2` at
/// `e = 0`. Constant `1/c^2` for `alpha = 2`, strictly decreasing in `e`
/// for `alpha < 2`.
pub fn weight(e: f64, params: KernelParams) -> Result<f64> {
    params.validate()?;
    check_residual(e)?;
    Ok(weight_raw(e, params.alpha, params.c))
}

/// Welsch limit `1 - exp(-e^2 / (2 c^2))` of the family as `alpha -> -inf`.
///
/// The shape grid never reaches this branch; it exists so tests can pin the
/// limiting behavior.
pub fn rho_welsch(e: f64, c: f64) -> f64 {
    let s = (e * e) / (c * c);
    -(-0.5 * s).exp_m1()
}

pub(crate) fn rho_raw(e: f64, alpha: f64, c: f64) -> f64 {
    let s = (e * e) / (c * c);
    if (alpha - 2.0).abs() < BRANCH_EPS {
        0.5 * s
    } else if alpha.abs() < BRANCH_EPS {
        (0.5 * s).ln_1p()
    } else {
        // (b/alpha) * ((s/b + 1)^(alpha/2) - 1), written with ln_1p/exp_m1
        // so the removable singularities at alpha = 0, 2 stay benign.
        let b = (alpha - 2.0).abs();
        (b / alpha) * ((alpha / 2.0) * (s / b).ln_1p()).exp_m1()
    }
}

pub(crate) fn drho_raw(e: f64, alpha: f64, c: f64) -> f64 {
    e * weight_raw(e, alpha, c)
}

pub(crate) fn weight_raw(e: f64, alpha: f64, c: f64) -> f64 {
    let inv_c2 = 1.0 / (c * c);
    let s = e * e * inv_c2;
    if (alpha - 2.0).abs() < BRANCH_EPS {
        inv_c2
    } else if alpha.abs() < BRANCH_EPS {
        inv_c2 / (0.5 * s + 1.0)
    } else {
        let b = (alpha - 2.0).abs();
        inv_c2 * ((alpha / 2.0 - 1.0) * (s / b).ln_1p()).exp()
    }
}

/// Uniform grid of shape-parameter values searched during estimation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AlphaGrid {
    min: f64,
    max: f64,
    step: f64,
}

impl Default for AlphaGrid {
    fn default() -> Self {
        Self { min: -10.0, max: 2.0, step: 0.1 }
    }
}

impl AlphaGrid {
    pub fn new(min: f64, max: f64, step: f64) -> Result<Self> {
        if !(min.is_finite() && max.is_finite() && step.is_finite()) {
            return Err(invalid("grid bounds and step must be finite"));
        }
        if min >= max || step <= 0.0 {
            return Err(invalid(format!(
                "grid requires min < max and step > 0, got [{min}, {max}] step {step}"
            )));
        }
        let count = (max - min) / step;
        if (count - count.round()).abs() > 1e-9 {
            return Err(invalid(format!(
                "grid span {} is not an integer multiple of step {step}",
                max - min
            )));
        }
        Ok(Self { min, max, step })
    }

    pub fn min(&self) -> f64 {
        self.min
    }

    pub fn max(&self) -> f64 {
        self.max
    }

    pub fn step(&self) -> f64 {
        self.step
    }

    /// Number of grid nodes, endpoints included (121 for the defaults).
    pub fn node_count(&self) -> usize {
        ((self.max - self.min) / self.step).round() as usize + 1
    }

    /// Value of node `i`. The last node is pinned to `max` exactly so the
    /// grid never exceeds the valid shape range through float drift.
    pub fn node(&self, i: usize) -> f64 {
        debug_assert!(i < self.node_count());
        if i + 1 == self.node_count() {
            self.max
        } else {
            self.min + self.step * i as f64
        }
    }

    pub fn nodes(&self) -> impl Iterator<Item = f64> + '_ {
        (0..self.node_count()).map(move |i| self.node(i))
    }

    /// Nearest grid node after clamping to `[min, max]`, half-up ties.
    /// Returns `(index, clamped)`.
    pub fn snap_index(&self, alpha: f64) -> (usize, bool) {
        let clamped = alpha < self.min || alpha > self.max;
        let a = alpha.clamp(self.min, self.max);
        let idx = ((a - self.min) / self.step).round() as usize;
        (idx.min(self.node_count() - 1), clamped)
    }
}

static SHARED_TABLE: OnceLock<PartitionTable> = OnceLock::new();
static SHARED_TABLE_BUILDS: AtomicUsize = AtomicUsize::new(0);

/// Precomputed `log Z(alpha)` values over a shape grid.
///
/// Immutable after construction and safe to share across threads; lookups
/// are O(1) index snaps.
#[derive(Debug, Clone, PartialEq)]
pub struct PartitionTable {
    grid: AlphaGrid,
    log_z: Vec<f64>,
    tau: f64,
    quad_nodes: usize,
}

/// Log of the truncated partition integral
/// `Z(alpha) = ∫_{-tau}^{tau} exp(-rho(x; alpha, 1)) dx`,
/// by composite Simpson quadrature over `quad_nodes` subintervals.
pub fn log_partition(alpha: f64, tau: f64, quad_nodes: usize) -> Result<f64> {
    if !alpha.is_finite() || alpha > 2.0 {
        return Err(invalid(format!("shape must be finite and <= 2, got {alpha}")));
    }
    if !tau.is_finite() || tau <= 0.0 {
        return Err(invalid(format!("truncation bound must be > 0, got {tau}")));
    }
    if quad_nodes < 16 || quad_nodes % 2 != 0 {
        return Err(invalid(format!(
            "quadrature subinterval count must be even and >= 16, got {quad_nodes}"
        )));
    }
    let n = quad_nodes;
    let h = 2.0 * tau / n as f64;
    let f = |x: f64| (-rho_raw(x, alpha, 1.0)).exp();
    let mut acc = f(-tau) + f(tau);
    for i in 1..n {
        let x = -tau + h * i as f64;
        let w = if i % 2 == 1 { 4.0 } else { 2.0 };
        acc += w * f(x);
    }
    Ok((acc * h / 3.0).ln())
}

/// Builds the lookup table by evaluating [`log_partition`] at every grid
/// node. Deterministic: identical inputs give bit-identical tables.
pub fn build_partition_table(grid: AlphaGrid, tau: f64, quad_nodes: usize) -> Result<PartitionTable> {
    let log_z: Vec<f64> = grid
        .nodes()
        .map(|a| log_partition(a, tau, quad_nodes))
        .collect::<Result<_>>()?;
    if let Some(bad) = log_z.iter().find(|v| !v.is_finite()) {
        return Err(Error::NumericalFailure(format!(
            "non-finite partition value {bad} in table"
        )));
    }
    Ok(PartitionTable { grid, log_z, tau, quad_nodes })
}

impl PartitionTable {
    pub fn build(grid: AlphaGrid, tau: f64, quad_nodes: usize) -> Result<Self> {
        build_partition_table(grid, tau, quad_nodes)
    }

    pub fn grid(&self) -> &AlphaGrid {
        &self.grid
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }

    pub fn quad_nodes(&self) -> usize {
        self.quad_nodes
    }

    pub fn log_z(&self) -> &[f64] {
        &self.log_z
    }

    /// Stored `log Z` for the grid node nearest to `alpha` (clamped).
    pub fn lookup_log_partition(&self, alpha: f64) -> f64 {
        self.lookup_log_partition_flagged(alpha).0
    }

    /// As [`Self::lookup_log_partition`], also reporting whether `alpha`
    /// had to be clamped into the grid range.
    pub fn lookup_log_partition_flagged(&self, alpha: f64) -> (f64, bool) {
        let (idx, clamped) = self.grid.snap_index(alpha);
        (self.log_z[idx], clamped)
    }

    /// Grid node value nearest to `alpha` (clamped).
    pub fn snap_alpha(&self, alpha: f64) -> f64 {
        let (idx, _) = self.grid.snap_index(alpha);
        self.grid.node(idx)
    }

    /// Writes the table as text: `#` header lines recording the quadrature
    /// configuration, then one `alpha log_z` pair per line. Values use the
    /// shortest round-trip decimal form, so a dump can be reloaded exactly.
    pub fn write_dump<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "# partition table for the generalized loss at c = 1")?;
        writeln!(w, "# tau = {}", self.tau)?;
        writeln!(w, "# quad_nodes = {}", self.quad_nodes)?;
        for (i, lz) in self.log_z.iter().enumerate() {
            writeln!(w, "{} {}", self.grid.node(i), lz)?;
        }
        Ok(())
    }

    /// Reads a dump produced by [`Self::write_dump`].
    pub fn read_dump<R: BufRead>(r: R) -> Result<Self> {
        let mut tau = None;
        let mut quad_nodes = None;
        let mut pairs: Vec<(f64, f64)> = Vec::new();
        for (lineno, line) in r.lines().enumerate() {
            let line = line?;
            let line = line.trim();
            let parse_err = |message: &str| Error::Parse {
                line: lineno + 1,
                message: message.to_string(),
            };
            if line.is_empty() {
                continue;
            }
            if let Some(rest) = line.strip_prefix('#') {
                let rest = rest.trim();
                if let Some(v) = rest.strip_prefix("tau =") {
                    tau = Some(v.trim().parse::<f64>().map_err(|_| parse_err("bad tau"))?);
                } else if let Some(v) = rest.strip_prefix("quad_nodes =") {
                    quad_nodes =
                        Some(v.trim().parse::<usize>().map_err(|_| parse_err("bad quad_nodes"))?);
                }
                continue;
            }
            let mut fields = line.split_whitespace();
            let a: f64 = fields
                .next()
                .ok_or_else(|| parse_err("missing alpha"))?
                .parse()
                .map_err(|_| parse_err("bad alpha"))?;
            let z: f64 = fields
                .next()
                .ok_or_else(|| parse_err("missing log_z"))?
                .parse()
                .map_err(|_| parse_err("bad log_z"))?;
            if fields.next().is_some() {
                return Err(parse_err("expected exactly two columns"));
            }
            pairs.push((a, z));
        }
        if pairs.len() < 2 {
            return Err(invalid("partition dump needs at least two nodes"));
        }
        let tau = tau.ok_or_else(|| invalid("partition dump missing tau header"))?;
        let quad_nodes = quad_nodes.ok_or_else(|| invalid("partition dump missing quad_nodes header"))?;
        let min = pairs[0].0;
        let max = pairs[pairs.len() - 1].0;
        let step = (max - min) / (pairs.len() - 1) as f64;
        let grid = AlphaGrid::new(min, max, step)?;
        if grid.node_count() != pairs.len() {
            return Err(invalid("partition dump nodes are not uniformly spaced"));
        }
        let log_z: Vec<f64> = pairs.iter().map(|(_, z)| *z).collect();
        if log_z.iter().any(|v| !v.is_finite()) {
            return Err(Error::NumericalFailure("non-finite value in dump".into()));
        }
        Ok(Self { grid, log_z, tau, quad_nodes })
    }
}

/// Process-wide table for the default grid and quadrature configuration.
/// Built at most once per process; see [`shared_table_build_count`].
pub fn shared_table() -> &'static PartitionTable {
    SHARED_TABLE.get_or_init(|| {
        SHARED_TABLE_BUILDS.fetch_add(1, Ordering::SeqCst);
        build_partition_table(AlphaGrid::default(), DEFAULT_TAU, DEFAULT_QUAD_NODES)
            .expect("default partition table configuration is valid")
    })
}

/// How many times the shared default table has been constructed in this
/// process. Stays at one no matter how often [`shared_table`] is called.
pub fn shared_table_build_count() -> usize {
    SHARED_TABLE_BUILDS.load(Ordering::SeqCst)
}
