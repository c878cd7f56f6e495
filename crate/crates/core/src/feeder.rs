//! Linearized voltage model of a radial feeder.
//!
//! Buses are numbered `0..=N` with the substation at `0`. Vectors indexed by
//! bus use position `n - 1` for bus `n`, so they have length `N`.
//!
//! Around the no-load point with the substation held at 1 p.u., voltage
//! magnitudes are affine in the injections: `v = R p + X q + omega`, where
//! `R[n, m]` (resp. `X`) is the resistance (reactance) of the path shared by
//! the routes from the substation to `n` and to `m`.

use nalgebra::{DMatrix, DVector};

use crate::error::{check_dim, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Line {
    pub parent: usize,
    pub child: usize,
    /// Resistance, p.u.
    pub r: f64,
    /// Reactance, p.u.
    pub x: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    bus_count: usize,
    lines: Vec<Line>,
    pub base_mva: f64,
    pub base_kv: f64,
    /// `parent[n - 1]` is the upstream bus of bus `n`.
    parent: Vec<usize>,
    /// `line_of[n - 1]` indexes the line feeding bus `n`.
    line_of: Vec<usize>,
}

impl Network {
    /// Validates that `lines` form a tree rooted at the substation spanning
    /// buses `0..=bus_count` and that every impedance is strictly positive.
    pub fn new(bus_count: usize, lines: Vec<Line>, base_mva: f64, base_kv: f64) -> Result<Self> {
        if bus_count == 0 {
            return Err(Error::Validation("network needs at least one bus".into()));
        }
        if !(base_mva.is_finite() && base_mva > 0.0) || !(base_kv.is_finite() && base_kv > 0.0) {
            return Err(Error::Validation(format!(
                "base values must be positive (base_mva = {base_mva}, base_kv = {base_kv})"
            )));
        }
        if lines.len() != bus_count {
            return Err(Error::Topology(format!(
                "a radial feeder with {bus_count} buses needs {bus_count} lines, found {}",
                lines.len()
            )));
        }

        let mut parent = vec![usize::MAX; bus_count];
        let mut line_of = vec![usize::MAX; bus_count];
        for (k, line) in lines.iter().enumerate() {
            if !(line.r.is_finite() && line.r > 0.0) || !(line.x.is_finite() && line.x > 0.0) {
                return Err(Error::Validation(format!(
                    "line {}-{} must have positive impedance (r = {}, x = {})",
                    line.parent, line.child, line.r, line.x
                )));
            }
            if line.child == 0 || line.child > bus_count || line.parent > bus_count {
                return Err(Error::Topology(format!(
                    "line {}-{} references a bus outside 0..={bus_count} or feeds the substation",
                    line.parent, line.child
                )));
            }
            if line.parent == line.child {
                return Err(Error::Topology(format!("line {0}-{0} is a self-loop", line.child)));
            }
            let slot = line.child - 1;
            if parent[slot] != usize::MAX {
                return Err(Error::Topology(format!(
                    "bus {} is fed by more than one line",
                    line.child
                )));
            }
            parent[slot] = line.parent;
            line_of[slot] = k;
        }

        // Every bus must reach the substation in at most `bus_count` hops.
        for start in 1..=bus_count {
            let mut bus = start;
            let mut hops = 0;
            while bus != 0 {
                bus = parent[bus - 1];
                hops += 1;
                if hops > bus_count {
                    return Err(Error::Topology(format!(
                        "bus {start} is on a cycle disconnected from the substation"
                    )));
                }
            }
        }

        Ok(Network {
            bus_count,
            lines,
            base_mva,
            base_kv,
            parent,
            line_of,
        })
    }

    pub fn bus_count(&self) -> usize {
        self.bus_count
    }

    pub fn lines(&self) -> &[Line] {
        &self.lines
    }

    pub fn parent(&self, bus: usize) -> usize {
        self.parent[bus - 1]
    }

    /// Buses on the route from `bus` up to (excluding) the substation.
    fn route(&self, bus: usize) -> impl Iterator<Item = usize> + '_ {
        std::iter::successors(Some(bus), move |&b| {
            let p = self.parent[b - 1];
            (p != 0).then_some(p)
        })
    }
}

/// Sensitivities of the linear voltage model `v = R p + X q + omega`.
#[derive(Debug, Clone, PartialEq)]
pub struct SensitivityModel {
    pub r: DMatrix<f64>,
    pub x: DMatrix<f64>,
    pub omega: DVector<f64>,
}

impl SensitivityModel {
    /// Builds a model from explicit matrices, checking symmetry,
    /// nonnegativity, positive definiteness and `omega > 0`.
    pub fn new(r: DMatrix<f64>, x: DMatrix<f64>, omega: DVector<f64>) -> Result<Self> {
        let n = omega.len();
        check_dim("R rows", n, r.nrows())?;
        check_dim("R cols", n, r.ncols())?;
        check_dim("X rows", n, x.nrows())?;
        check_dim("X cols", n, x.ncols())?;
        for (name, m) in [("R", &r), ("X", &x)] {
            if m.iter().any(|v| !v.is_finite() || *v < 0.0) {
                return Err(Error::Validation(format!("{name} must be finite and nonnegative")));
            }
            if m != &m.transpose() {
                return Err(Error::Validation(format!("{name} must be symmetric")));
            }
            if m.clone().cholesky().is_none() {
                return Err(Error::Validation(format!("{name} must be positive definite")));
            }
        }
        if omega.iter().any(|w| !(w.is_finite() && *w > 0.0)) {
            return Err(Error::Validation("omega must be positive".into()));
        }
        Ok(SensitivityModel { r, x, omega })
    }

    pub fn bus_count(&self) -> usize {
        self.omega.len()
    }
}

/// Common-path impedance sensitivities of a radial feeder with the
/// substation at 1 p.u.
pub fn build_sensitivities(network: &Network) -> Result<SensitivityModel> {
    let n = network.bus_count();

    // Cumulative impedance from the substation to each bus.
    let mut cum_r = vec![f64::NAN; n];
    let mut cum_x = vec![f64::NAN; n];
    fn fill(net: &Network, bus: usize, cum_r: &mut [f64], cum_x: &mut [f64]) {
        if !cum_r[bus - 1].is_nan() {
            return;
        }
        let line = net.lines[net.line_of[bus - 1]];
        let (up_r, up_x) = match net.parent(bus) {
            0 => (0.0, 0.0),
            p => {
                fill(net, p, cum_r, cum_x);
                (cum_r[p - 1], cum_x[p - 1])
            }
        };
        cum_r[bus - 1] = up_r + line.r;
        cum_x[bus - 1] = up_x + line.x;
    }
    for bus in 1..=n {
        fill(network, bus, &mut cum_r, &mut cum_x);
    }

    let mut r = DMatrix::zeros(n, n);
    let mut x = DMatrix::zeros(n, n);
    let mut on_route = vec![false; n + 1];
    for a in 1..=n {
        on_route.iter_mut().for_each(|f| *f = false);
        for b in network.route(a) {
            on_route[b] = true;
        }
        for b in a..=n {
            // Deepest common ancestor of a and b, or the substation.
            let shared = network.route(b).find(|&k| on_route[k]);
            let (sr, sx) = shared.map_or((0.0, 0.0), |k| (cum_r[k - 1], cum_x[k - 1]));
            r[(a - 1, b - 1)] = sr;
            r[(b - 1, a - 1)] = sr;
            x[(a - 1, b - 1)] = sx;
            x[(b - 1, a - 1)] = sx;
        }
    }

    SensitivityModel::new(r, x, DVector::from_element(n, 1.0))
}

/// `v = R p + X q + omega`.
pub fn voltages_of(model: &SensitivityModel, p: &DVector<f64>, q: &DVector<f64>) -> Result<DVector<f64>> {
    let n = model.bus_count();
    check_dim("active injections", n, p.len())?;
    check_dim("reactive injections", n, q.len())?;
    Ok(&model.r * p + &model.x * q + &model.omega)
}

/// Power delivered through the substation, `1^T (d - r)`; positive when the
/// feeder imports.
pub fn feeder_power_of(d: &DVector<f64>, r: &DVector<f64>) -> Result<f64> {
    check_dim("generation", d.len(), r.len())?;
    Ok(d.iter().zip(r.iter()).map(|(d, r)| d - r).sum())
}
