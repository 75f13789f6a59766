//! Adam over named parameter groups.
//!
//! Each group (map densities, a frame's window parameters, the response
//! curve, ...) keeps its own first/second moments, timestep, and learning
//! rate. Groups are stored in a sorted map and always iterated in name order,
//! so runs are deterministic.
//!
//! Two departures from textbook Adam, both for robustness:
//!
//! * non-finite gradient entries are skipped (the parameter and its moments
//!   stay untouched) and counted in [`Adam::skipped_nonfinite`];
//! * each per-scalar step is clamped to `lr * (1 + 1e-3)`. Plain Adam can
//!   transiently exceed `lr` by up to `1/sqrt(1 - beta2)` after a gradient
//!   sign flip; the clamp makes "one step moves a parameter by at most about
//!   the learning rate" a hard guarantee instead of a tendency.
//!
//! Some parameters live on manifolds (rotations): their groups expose the
//! raw step via [`Adam::deltas`] and the caller applies it by retraction.
//! Moments for those tangent coordinates persist across steps even though
//! the tangent itself resets to zero after every retraction.

use std::collections::BTreeMap;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPS: f64 = 1e-8;
/// Per-scalar steps never exceed `lr * STEP_CLAMP`.
pub const STEP_CLAMP: f64 = 1.0 + 1e-3;

#[derive(Debug, Clone)]
struct GroupState {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
    lr: f64,
}

#[derive(Debug, Clone, Default)]
pub struct Adam {
    groups: BTreeMap<String, GroupState>,
    /// Total gradient entries skipped for being NaN or infinite.
    pub skipped_nonfinite: u64,
}

impl Adam {
    pub fn new() -> Self {
        Adam::default()
    }

    /// Create the group if missing; if it exists, adjust its length (moments
    /// for existing leading entries are preserved, new entries start at zero)
    /// and update its learning rate.
    pub fn ensure_group(&mut self, name: &str, len: usize, lr: f64) {
        let g = self.groups.entry(name.to_string()).or_insert(GroupState {
            m: Vec::new(),
            v: Vec::new(),
            t: 0,
            lr,
        });
        g.lr = lr;
        if g.m.len() != len {
            g.m.resize(len, 0.0);
            g.v.resize(len, 0.0);
        }
    }

    pub fn has_group(&self, name: &str) -> bool {
        self.groups.contains_key(name)
    }

    /// Advance the group one step and return the per-scalar deltas to
    /// subtract from the parameters. Entries with non-finite gradients
    /// produce a zero delta and leave their moments untouched.
    pub fn deltas(&mut self, name: &str, grads: &[f64]) -> Vec<f64> {
        let g = self
            .groups
            .get_mut(name)
            .unwrap_or_else(|| panic!("unknown parameter group {name:?}"));
        assert_eq!(
            g.m.len(),
            grads.len(),
            "group {name:?} has {} parameters but got {} gradients",
            g.m.len(),
            grads.len()
        );
        g.t += 1;
        let bc1 = 1.0 - BETA1.powi(g.t as i32);
        let bc2 = 1.0 - BETA2.powi(g.t as i32);
        let max_step = g.lr * STEP_CLAMP;
        let mut out = vec![0.0f64; grads.len()];
        for i in 0..grads.len() {
            let grad = grads[i];
            if !grad.is_finite() {
                self.skipped_nonfinite += 1;
                continue;
            }
            g.m[i] = BETA1 * g.m[i] + (1.0 - BETA1) * grad;
            g.v[i] = BETA2 * g.v[i] + (1.0 - BETA2) * grad * grad;
            let m_hat = g.m[i] / bc1;
            let v_hat = g.v[i] / bc2;
            let step = g.lr * m_hat / (v_hat.sqrt() + EPS);
            out[i] = step.clamp(-max_step, max_step);
        }
        out
    }

    /// [`Adam::deltas`] plus the plain Euclidean update `params -= delta`.
    pub fn step(&mut self, name: &str, params: &mut [f64], grads: &[f64]) {
        let d = self.deltas(name, grads);
        assert_eq!(params.len(), d.len());
        for (p, d) in params.iter_mut().zip(&d) {
            *p -= d;
        }
    }

    /// Export all moments as named arrays (for checkpoints): per group,
    /// `"adam/<name>/m"`, `"adam/<name>/v"`, `"adam/<name>/t"`.
    pub fn export(&self) -> BTreeMap<String, Vec<f64>> {
        let mut out = BTreeMap::new();
        for (name, g) in &self.groups {
            out.insert(format!("adam/{name}/m"), g.m.clone());
            out.insert(format!("adam/{name}/v"), g.v.clone());
            out.insert(format!("adam/{name}/t"), vec![g.t as f64, g.lr]);
        }
        out
    }

    /// Restore moments exported by [`Adam::export`]; unknown arrays are
    /// ignored.
    pub fn import(&mut self, arrays: &BTreeMap<String, Vec<f64>>) {
        for (key, data) in arrays {
            let Some(rest) = key.strip_prefix("adam/") else {
                continue;
            };
            let Some((name, kind)) = rest.rsplit_once('/') else {
                continue;
            };
            let g = self.groups.entry(name.to_string()).or_insert(GroupState {
                m: Vec::new(),
                v: Vec::new(),
                t: 0,
                lr: 0.0,
            });
            match kind {
                "m" => g.m = data.clone(),
                "v" => g.v = data.clone(),
                "t" if data.len() == 2 => {
                    g.t = data[0] as u64;
                    g.lr = data[1];
                }
                _ => {}
            }
        }
    }
}
