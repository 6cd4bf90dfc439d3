//! The adapter between the ID model and the language backbone.
//!
//! Per backbone layer the user vector `u` is projected to `p = W_u u + b_u`,
//! repeated into `P` (one row per virtual token), and blended with a learned
//! prefix `C` through a per-token sigmoid gate
//! `g = σ([C ‖ P] W_g)`, giving `D = g⊙C + (1−g)⊙P`. The rows of `D` are
//! the virtual tokens fed to that layer's attention.
//!
//! The alignment loss is a Gaussian-kernel MMD between the rows of `D` and
//! the clean hidden states entering the same layer.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamId, ParamStore, Tape, Var};
use crate::error::{Error, Result};
use crate::init::small_init;
use crate::tensor::Tensor;

pub const ADAPTER_PREFIX: &str = "adapter.";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdapterConfig {
    /// Virtual tokens per layer.
    pub prompt_len: usize,
    /// One projection and prefix per layer; otherwise one shared set.
    pub layer_wise: bool,
    /// Gate between `C` and `P`; otherwise `D = P`.
    pub refinement: bool,
    /// One gate per layer instead of a shared one.
    pub per_layer_gate: bool,
    /// Kernel bandwidth `ρ`.
    pub rho: f64,
    /// Replace `ρ` by half the median pairwise squared distance of the pooled
    /// samples, per layer and example.
    pub median_bandwidth: bool,
}

impl Default for AdapterConfig {
    fn default() -> Self {
        AdapterConfig {
            prompt_len: 2,
            layer_wise: true,
            refinement: true,
            per_layer_gate: false,
            rho: 1.0,
            median_bandwidth: false,
        }
    }
}

impl AdapterConfig {
    pub fn validate(&self) -> Result<()> {
        if self.prompt_len == 0 {
            return Err(Error::Config("prompt_len must be at least 1".into()));
        }
        if !(self.rho > 0.0 && self.rho.is_finite()) {
            return Err(Error::Config(format!(
                "rho must be positive, got {}",
                self.rho
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct Slot {
    w_u: ParamId,
    b_u: ParamId,
    c: Option<ParamId>,
}

/// Handles to the adapter parameters.
#[derive(Clone, Debug)]
pub struct Adapter {
    cfg: AdapterConfig,
    layers: usize,
    user_dim: usize,
    d_model: usize,
    slots: Vec<Slot>,
    gates: Vec<ParamId>,
}

/// Prefix construction for one user, on a tape.
#[derive(Clone, Debug)]
pub struct RefinedPrefixes {
    /// `D` per layer, `L′×d′`.
    pub prefixes: Vec<Var>,
    /// `p` per layer, `1×d′`.
    pub projections: Vec<Var>,
    /// `g` per layer, `L′×1`; absent without refinement.
    pub gates: Vec<Option<Var>>,
}

impl Adapter {
    pub fn new(
        store: &mut ParamStore,
        cfg: AdapterConfig,
        layers: usize,
        user_dim: usize,
        d_model: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        cfg.validate()?;
        if layers == 0 || user_dim == 0 || d_model == 0 {
            return Err(Error::Config(format!(
                "adapter needs positive sizes, got layers={layers} d={user_dim} d'={d_model}"
            )));
        }
        let n_slots = if cfg.layer_wise { layers } else { 1 };
        let mut slots = Vec::with_capacity(n_slots);
        for s in 0..n_slots {
            let tag = if cfg.layer_wise {
                format!("l{s}")
            } else {
                "shared".into()
            };
            let w_u = store.register(
                format!("adapter.{tag}.w_u"),
                small_init(rng, &[d_model, user_dim]),
            )?;
            let b_u =
                store.register(format!("adapter.{tag}.b_u"), small_init(rng, &[1, d_model]))?;
            let c = if cfg.refinement {
                Some(store.register(
                    format!("adapter.{tag}.c"),
                    small_init(rng, &[cfg.prompt_len, d_model]),
                )?)
            } else {
                None
            };
            slots.push(Slot { w_u, b_u, c });
        }
        let n_gates = match (cfg.refinement, cfg.per_layer_gate) {
            (false, _) => 0,
            (true, false) => 1,
            (true, true) => layers,
        };
        let gates = (0..n_gates)
            .map(|g| {
                let name = if cfg.per_layer_gate {
                    format!("adapter.l{g}.w_g")
                } else {
                    "adapter.w_g".into()
                };
                store.register(name, small_init(rng, &[2 * d_model, 1]))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Adapter {
            cfg,
            layers,
            user_dim,
            d_model,
            slots,
            gates,
        })
    }

    pub fn config(&self) -> &AdapterConfig {
        &self.cfg
    }

    pub fn layers(&self) -> usize {
        self.layers
    }

    pub fn user_dim(&self) -> usize {
        self.user_dim
    }

    pub fn d_model(&self) -> usize {
        self.d_model
    }

    /// Builds `D` for every layer from a `1×d` user vector.
    pub fn build_prefixes(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        u: Var,
    ) -> Result<RefinedPrefixes> {
        let shape = tape.shape(u);
        if shape != [1, self.user_dim] {
            return Err(Error::shape("build_prefixes", shape, &[1, self.user_dim]));
        }
        let n = self.cfg.prompt_len;
        let mut out = RefinedPrefixes {
            prefixes: Vec::with_capacity(self.layers),
            projections: Vec::with_capacity(self.layers),
            gates: Vec::with_capacity(self.layers),
        };
        for l in 0..self.layers {
            let slot = &self.slots[if self.cfg.layer_wise { l } else { 0 }];
            let w = tape.param(store, slot.w_u);
            let b = tape.param(store, slot.b_u);
            let p = project_user(tape, u, w, b)?;
            let rep = tape.repeat_rows(p, n)?;
            let (d, g) = match slot.c {
                Some(c) => {
                    let c = tape.param(store, c);
                    let gate = self.gates[if self.cfg.per_layer_gate { l } else { 0 }];
                    let w_g = tape.param(store, gate);
                    let g = compute_gate(tape, c, rep, w_g)?;
                    (refine(tape, c, rep, g)?, Some(g))
                }
                None => (rep, None),
            };
            out.prefixes.push(d);
            out.projections.push(p);
            out.gates.push(g);
        }
        Ok(out)
    }

    /// Mean per-layer MMD between the prefixes and the clean states entering
    /// each layer.
    pub fn alignment_loss(
        &self,
        tape: &mut Tape,
        prefixes: &[Var],
        clean: &[Tensor],
    ) -> Result<Var> {
        alignment_loss(
            tape,
            prefixes,
            clean,
            self.cfg.rho,
            self.cfg.median_bandwidth,
        )
    }
}

/// `p = u W_uᵀ + b_u` for a `1×d` user row and `W_u` stored `d′×d`.
pub fn project_user(tape: &mut Tape, u: Var, w_u: Var, b_u: Var) -> Result<Var> {
    let wt = tape.transpose(w_u)?;
    let p = tape.matmul(u, wt)?;
    tape.add(p, b_u)
}

/// `σ([C ‖ P] W_g)`, one value per virtual token (`L′×1`).
pub fn compute_gate(tape: &mut Tape, c: Var, p: Var, w_g: Var) -> Result<Var> {
    if tape.shape(c) != tape.shape(p) {
        return Err(Error::shape("compute_gate", tape.shape(c), tape.shape(p)));
    }
    let both = tape.concat(c, p, 1)?;
    let logits = tape.matmul(both, w_g)?;
    Ok(tape.sigmoid(logits))
}

/// `g⊙C + (1−g)⊙P` with `g` broadcast along the feature axis.
pub fn refine(tape: &mut Tape, c: Var, p: Var, g: Var) -> Result<Var> {
    let shape = tape.shape(c).to_vec();
    if tape.shape(p) != shape.as_slice() || tape.shape(g) != [shape[0], 1] {
        return Err(Error::shape("refine", &shape, tape.shape(g)));
    }
    let keep = tape.one_minus(g);
    let g = tape.repeat_cols(g, shape[1])?;
    let keep = tape.repeat_cols(keep, shape[1])?;
    let from_c = tape.mul(g, c)?;
    let from_p = tape.mul(keep, p)?;
    tape.add(from_c, from_p)
}

/// `exp(−‖x−y‖² / 2ρ)`.
pub fn gaussian_kernel(x: &[f64], y: &[f64], rho: f64) -> Result<f64> {
    if rho.is_nan() || rho <= 0.0 {
        return Err(Error::Config(format!(
            "kernel bandwidth must be positive, got {rho}"
        )));
    }
    if x.len() != y.len() {
        return Err(Error::shape("gaussian_kernel", &[x.len()], &[y.len()]));
    }
    let d: f64 = x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok((-d / (2.0 * rho)).exp())
}

fn kernel_mean(tape: &mut Tape, a: Var, b: Var, rho: f64) -> Result<Var> {
    let d = tape.pairwise_sq_dist(a, b)?;
    let k = tape.scale(d, -1.0 / (2.0 * rho));
    let k = tape.exp(k);
    Ok(tape.mean(k))
}

/// Off-tape mean kernel value over all row pairs of `h`, diagonal included.
fn constant_kernel_mean(h: &Tensor, rho: f64) -> f64 {
    let n = h.rows();
    let mut total = 0.0;
    for i in 0..n {
        let x = h.row_slice(i);
        for j in 0..n {
            let d: f64 = x
                .iter()
                .zip(h.row_slice(j))
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            total += (-d / (2.0 * rho)).exp();
        }
    }
    total / (n * n) as f64
}

/// Biased (V-statistic) squared MMD between the rows of `d` and the constant
/// rows of `h`. Each block mean uses its own sample counts.
pub fn mmd_loss(tape: &mut Tape, d: Var, h: &Tensor, rho: f64) -> Result<Var> {
    if rho.is_nan() || rho <= 0.0 {
        return Err(Error::Config(format!(
            "kernel bandwidth must be positive, got {rho}"
        )));
    }
    if tape.value(d).rank() != 2 || h.rank() != 2 || tape.value(d).cols() != h.cols() {
        return Err(Error::shape("mmd_loss", tape.shape(d), h.shape()));
    }
    let khh = constant_kernel_mean(h, rho);
    let h = tape.constant(h.clone());
    let kdd = kernel_mean(tape, d, d, rho)?;
    let kdh = kernel_mean(tape, d, h, rho)?;
    let cross = tape.scale(kdh, -2.0);
    let same = tape.add_scalar(kdd, khh);
    tape.add(same, cross)
}

/// Half the median pairwise squared distance over the pooled rows of `a`
/// and `b` (off-diagonal pairs), so that `2ρ` equals the median.
pub fn median_heuristic(a: &Tensor, b: &Tensor) -> f64 {
    let rows: Vec<&[f64]> = (0..a.rows())
        .map(|i| a.row_slice(i))
        .chain((0..b.rows()).map(|i| b.row_slice(i)))
        .collect();
    let mut dists = Vec::new();
    for i in 0..rows.len() {
        for j in (i + 1)..rows.len() {
            dists.push(
                rows[i]
                    .iter()
                    .zip(rows[j])
                    .map(|(x, y)| (x - y) * (x - y))
                    .sum::<f64>(),
            );
        }
    }
    if dists.is_empty() {
        return 1.0;
    }
    dists.sort_by(f64::total_cmp);
    let mid = dists.len() / 2;
    let median = if dists.len() % 2 == 0 {
        0.5 * (dists[mid - 1] + dists[mid])
    } else {
        dists[mid]
    };
    if median > 0.0 {
        median / 2.0
    } else {
        1.0
    }
}

/// Mean over layers of `mmd_loss(D_l, H̃_l)`.
pub fn alignment_loss(
    tape: &mut Tape,
    prefixes: &[Var],
    clean: &[Tensor],
    rho: f64,
    median_bandwidth: bool,
) -> Result<Var> {
    if prefixes.is_empty() || prefixes.len() != clean.len() {
        return Err(Error::Contract(format!(
            "alignment over {} prefixes and {} clean layers",
            prefixes.len(),
            clean.len()
        )));
    }
    let mut total: Option<Var> = None;
    for (&d, h) in prefixes.iter().zip(clean) {
        let rho = if median_bandwidth {
            median_heuristic(tape.value(d), h)
        } else {
            rho
        };
        let m = mmd_loss(tape, d, h, rho)?;
        total = Some(match total {
            Some(t) => tape.add(t, m)?,
            None => m,
        });
    }
    let total = total.expect("non-empty");
    Ok(tape.scale(total, 1.0 / prefixes.len() as f64))
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::autodiff::finite_diff_check;
    use crate::init::truncated_normal;

    fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        truncated_normal(rng, shape, 1.0, 3.0)
    }

    /// Direct double-loop V-statistic.
    fn mmd_oracle(d: &Tensor, h: &Tensor, rho: f64) -> f64 {
        let k = |x: &[f64], y: &[f64]| {
            let mut s = 0.0;
            for i in 0..x.len() {
                s += (x[i] - y[i]).powi(2);
            }
            (-s / (2.0 * rho)).exp()
        };
        let block = |a: &Tensor, b: &Tensor| {
            let mut s = 0.0;
            for i in 0..a.rows() {
                for j in 0..b.rows() {
                    s += k(a.row_slice(i), b.row_slice(j));
                }
            }
            s / (a.rows() * b.rows()) as f64
        };
        block(d, d) + block(h, h) - 2.0 * block(d, h)
    }

    fn mmd_value(d: &Tensor, h: &Tensor, rho: f64) -> f64 {
        let mut tape = Tape::new();
        let d = tape.constant(d.clone());
        let m = mmd_loss(&mut tape, d, h, rho).unwrap();
        tape.value(m).item()
    }

    #[test]
    fn projection_cases() {
        let mut tape = Tape::new();
        let u = tape.constant(Tensor::row(&[1.0, -2.0, 3.0]));
        let eye = tape.constant(Tensor::identity(3));
        let zero = tape.constant(Tensor::zeros([1, 3]));
        let p = project_user(&mut tape, u, eye, zero).unwrap();
        assert_eq!(tape.value(p).data(), &[1.0, -2.0, 3.0]);

        let u0 = tape.constant(Tensor::zeros([1, 3]));
        let w = tape.constant(Tensor::full([5, 3], 0.7));
        let b = tape.constant(Tensor::row(&[1.0, 2.0, 3.0, 4.0, 5.0]));
        let p = project_user(&mut tape, u0, w, b).unwrap();
        assert_eq!(tape.value(p).data(), &[1.0, 2.0, 3.0, 4.0, 5.0]);
    }

    #[test]
    fn projection_matches_matrix_vector_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (w, b, u) = (
            random(&mut rng, &[5, 3]),
            random(&mut rng, &[1, 5]),
            random(&mut rng, &[1, 3]),
        );
        let mut expected = [0.0; 5];
        for (r, e) in expected.iter_mut().enumerate() {
            *e = b.data()[r] + (0..3).map(|c| w.get(r, c) * u.data()[c]).sum::<f64>();
        }
        let mut tape = Tape::new();
        let (wv, bv, uv) = (tape.constant(w), tape.constant(b), tape.constant(u));
        let p = project_user(&mut tape, uv, wv, bv).unwrap();
        for (a, e) in tape.value(p).data().iter().zip(expected) {
            assert!((a - e).abs() < 1e-12);
        }
        let bad = tape.constant(Tensor::zeros([1, 4]));
        assert!(project_user(&mut tape, bad, wv, bv).is_err());
    }

    #[test]
    fn gate_values() {
        let mut tape = Tape::new();
        let c = tape.constant(Tensor::full([3, 2], 0.4));
        let p = tape.constant(Tensor::full([3, 2], -1.3));
        let zero = tape.constant(Tensor::zeros([4, 1]));
        let g = compute_gate(&mut tape, c, p, zero).unwrap();
        assert!(tape.value(g).data().iter().all(|&v| v == 0.5));

        // Logit of ln 3 on every token.
        let c = tape.constant(Tensor::full([2, 2], 1.0));
        let p = tape.constant(Tensor::zeros([2, 2]));
        let w = tape.constant(Tensor::column(&[
            3f64.ln() / 2.0,
            3f64.ln() / 2.0,
            5.0,
            5.0,
        ]));
        let g = compute_gate(&mut tape, c, p, w).unwrap();
        for &v in tape.value(g).data() {
            assert!((v - 0.75).abs() < 1e-12);
        }
        let bad = tape.constant(Tensor::zeros([1, 2]));
        assert!(compute_gate(&mut tape, c, bad, w).is_err());
    }

    #[test]
    fn gate_saturates_monotonically() {
        let mut last = 0.0;
        for scale in [0.0, 1.0, 10.0, 100.0, 1e4] {
            let mut tape = Tape::new();
            let c = tape.constant(Tensor::full([1, 1], 1.0));
            let p = tape.constant(Tensor::full([1, 1], 1.0));
            let w = tape.constant(Tensor::column(&[scale, scale]));
            let g = compute_gate(&mut tape, c, p, w).unwrap();
            let v = tape.value(g).item();
            assert!(v >= last && v < 1.0);
            last = v;
        }
        assert!(last > 1.0 - 1e-12);
    }

    #[test]
    fn refine_endpoints_are_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (c, p) = (random(&mut rng, &[2, 3]), random(&mut rng, &[2, 3]));
        let mut tape = Tape::new();
        let (cv, pv) = (tape.constant(c.clone()), tape.constant(p.clone()));
        let g = tape.constant(Tensor::column(&[1.0, 0.0]));
        let d = refine(&mut tape, cv, pv, g).unwrap();
        assert_eq!(tape.value(d).row_slice(0), c.row_slice(0));
        assert_eq!(tape.value(d).row_slice(1), p.row_slice(1));

        let half = tape.constant(Tensor::column(&[0.5, 0.5]));
        let d = refine(&mut tape, cv, cv, half).unwrap();
        assert_eq!(tape.value(d), &c);
    }

    #[test]
    fn kernel_values() {
        assert_eq!(gaussian_kernel(&[0.3, 1.0], &[0.3, 1.0], 0.7).unwrap(), 1.0);
        let k = gaussian_kernel(&[0.0], &[2.0], 2.0).unwrap();
        assert!((k - (-1f64).exp()).abs() < 1e-15);
        assert!((k - 0.367879).abs() < 1e-6);
        assert!(gaussian_kernel(&[0.0], &[1.0], 0.0).is_err());
        assert!(gaussian_kernel(&[0.0], &[1.0], -1.0).is_err());
    }

    #[test]
    fn mmd_closed_forms() {
        let d = Tensor::row(&[0.0, 0.0]);
        let h = Tensor::row(&[2.0, 0.0]);
        let expected = 2.0 - 2.0 * (-1f64).exp();
        assert!((mmd_value(&d, &h, 2.0) - expected).abs() < 1e-12);
        assert!((expected - 1.264241).abs() < 1e-6);

        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = random(&mut rng, &[4, 3]);
        assert!(mmd_value(&x, &x, 1.0).abs() <= 1e-12);

        let mut tape = Tape::new();
        let dv = tape.constant(d.clone());
        assert!(mmd_loss(&mut tape, dv, &Tensor::zeros([2, 3]), 1.0).is_err());
        assert!(mmd_loss(&mut tape, dv, &h, 0.0).is_err());
    }

    #[test]
    fn mmd_gradient_reaches_prefix_only() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut tape = Tape::new();
        let d = tape.leaf(random(&mut rng, &[2, 3]), true);
        let h = random(&mut rng, &[5, 3]);
        let m = mmd_loss(&mut tape, d, &h, 1.0).unwrap();
        let grads = tape.backward(m).unwrap();
        assert!(grads.wrt(d).unwrap().data().iter().any(|&g| g != 0.0));
    }

    #[test]
    fn layer_average_is_linear() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let h0 = random(&mut rng, &[3, 4]);
        let d1 = random(&mut rng, &[2, 4]);
        let h1 = random(&mut rng, &[3, 4]);
        let mut tape = Tape::new();
        let aligned = tape.constant(h0.clone());
        let off = tape.constant(d1.clone());
        let loss = alignment_loss(
            &mut tape,
            &[aligned, off],
            &[h0.clone(), h1.clone()],
            1.0,
            false,
        )
        .unwrap();
        let expected = 0.5 * mmd_oracle(&d1, &h1, 1.0);
        assert!((tape.value(loss).item() - expected).abs() < 1e-12);

        let both = alignment_loss(
            &mut tape,
            &[aligned, aligned],
            &[h0.clone(), h0.clone()],
            1.0,
            false,
        )
        .unwrap();
        assert!(tape.value(both).item().abs() < 1e-12);
        assert!(alignment_loss(&mut tape, &[aligned], &[h0.clone(), h1], 1.0, false).is_err());
    }

    #[test]
    fn median_heuristic_of_three_points() {
        // Squared distances 1, 4, 9: median 4, so ρ = 2.
        let a = Tensor::column(&[0.0, 1.0]);
        let b = Tensor::column(&[3.0]);
        assert_eq!(median_heuristic(&a, &b), 2.0);
        assert_eq!(
            median_heuristic(&Tensor::scalar(1.0), &Tensor::scalar(1.0)),
            1.0
        );
    }

    fn adapter(cfg: AdapterConfig, layers: usize, d: usize, dp: usize) -> (Adapter, ParamStore) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let a = Adapter::new(&mut store, cfg, layers, d, dp, &mut rng).unwrap();
        (a, store)
    }

    #[test]
    fn parameter_layout() {
        let (_, full) = adapter(AdapterConfig::default(), 3, 4, 8);
        let per_layer = 8 * 4 + 8 + 2 * 8;
        assert_eq!(full.num_elements(ADAPTER_PREFIX), 3 * per_layer + 16);
        for (_, t) in full.named_tensors(ADAPTER_PREFIX) {
            assert!(t.data().iter().all(|v| v.abs() <= 0.02));
        }

        let (_, shared) = adapter(
            AdapterConfig {
                layer_wise: false,
                ..Default::default()
            },
            3,
            4,
            8,
        );
        assert_eq!(shared.num_elements(ADAPTER_PREFIX), per_layer + 16);

        let (_, plain) = adapter(
            AdapterConfig {
                refinement: false,
                ..Default::default()
            },
            3,
            4,
            8,
        );
        assert_eq!(plain.num_elements(ADAPTER_PREFIX), 3 * (8 * 4 + 8));
        assert!(plain.id("adapter.w_g").is_none());
    }

    #[test]
    fn minimal_config_is_one_refine() {
        let cfg = AdapterConfig {
            prompt_len: 1,
            ..Default::default()
        };
        let (a, store) = adapter(cfg, 1, 3, 3);
        let mut tape = Tape::new();
        let u = tape.constant(Tensor::row(&[0.5, -0.1, 0.2]));
        let out = a.build_prefixes(&mut tape, &store, u).unwrap();
        let c = store.value(store.id("adapter.l0.c").unwrap());
        let p = tape.value(out.projections[0]);
        let g = tape.value(out.gates[0].unwrap()).item();
        let d = tape.value(out.prefixes[0]);
        for k in 0..3 {
            let expected = g * c.data()[k] + (1.0 - g) * p.data()[k];
            assert!((d.data()[k] - expected).abs() < 1e-15);
        }
    }

    #[test]
    fn layers_differ_and_ablations_behave() {
        let (a, store) = adapter(AdapterConfig::default(), 2, 3, 4);
        let mut tape = Tape::new();
        let u = tape.constant(Tensor::row(&[0.5, -0.1, 0.2]));
        let out = a.build_prefixes(&mut tape, &store, u).unwrap();
        assert!(
            tape.value(out.prefixes[0])
                .max_abs_diff(tape.value(out.prefixes[1]))
                > 0.0
        );

        let (a, store) = adapter(
            AdapterConfig {
                layer_wise: false,
                ..Default::default()
            },
            2,
            3,
            4,
        );
        // Tapes cache parameters by id, so each store gets its own.
        let mut tape = Tape::new();
        let u = tape.constant(Tensor::row(&[0.5, -0.1, 0.2]));
        let out = a.build_prefixes(&mut tape, &store, u).unwrap();
        assert_eq!(tape.value(out.prefixes[0]), tape.value(out.prefixes[1]));

        let (a, store) = adapter(
            AdapterConfig {
                refinement: false,
                prompt_len: 3,
                ..Default::default()
            },
            2,
            3,
            4,
        );
        let mut tape = Tape::new();
        let u = tape.constant(Tensor::row(&[0.5, -0.1, 0.2]));
        let out = a.build_prefixes(&mut tape, &store, u).unwrap();
        let d = tape.value(out.prefixes[1]);
        let p = tape.value(out.projections[1]);
        assert_eq!(d.shape(), &[3, 4]);
        for r in 0..3 {
            assert_eq!(d.row_slice(r), p.data());
        }
        assert!(out.gates.iter().all(Option::is_none));
    }

    #[test]
    fn full_gradient_check() {
        for per_layer_gate in [false, true] {
            let cfg = AdapterConfig {
                per_layer_gate,
                ..Default::default()
            };
            let (a, mut store) = adapter(cfg, 2, 4, 8);
            // Push gates away from 0.5 so their gradients are not trivial.
            for id in store.ids_with_prefix(ADAPTER_PREFIX) {
                let t = store.value(id).map(|v| v * 25.0);
                store.set_value(id, t).unwrap();
            }
            let mut rng = ChaCha8Rng::seed_from_u64(6);
            let u = random(&mut rng, &[1, 4]);
            let clean = [random(&mut rng, &[5, 8]), random(&mut rng, &[5, 8])];
            let targets = [random(&mut rng, &[2, 8]), random(&mut rng, &[2, 8])];
            let params = store.ids_with_prefix(ADAPTER_PREFIX);
            let report = finite_diff_check(&mut store, &params, 1e-5, 1e-4, |tape, store| {
                let uv = tape.constant(u.clone());
                let out = a.build_prefixes(tape, store, uv)?;
                let m = a.alignment_loss(tape, &out.prefixes, &clean)?;
                // A non-kernel term so that C, P and g all matter.
                let mut total = m;
                for (d, t) in out.prefixes.iter().zip(&targets) {
                    let t = tape.constant(t.clone());
                    let prod = tape.mul(*d, t)?;
                    let s = tape.sum(prod);
                    total = tape.add(total, s)?;
                }
                Ok(total)
            })
            .unwrap();
            assert!(report.failures.is_empty(), "{report:?}");
            assert_eq!(report.checked, store.num_elements(ADAPTER_PREFIX));
        }
    }

    proptest! {
        #[test]
        fn mmd_matches_double_loop(seed in any::<u64>(), n in 1usize..5, m in 1usize..7, dim in 1usize..6, rho in 0.1f64..4.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let d = random(&mut rng, &[n, dim]);
            let h = random(&mut rng, &[m, dim]);
            let got = mmd_value(&d, &h, rho);
            prop_assert!((got - mmd_oracle(&d, &h, rho)).abs() <= 1e-9);
            prop_assert!(got >= -1e-12);
        }

        #[test]
        fn gate_and_refine_bracket(seed in any::<u64>(), rows in 1usize..4, cols in 1usize..5, w_scale in 0.0f64..50.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let c = random(&mut rng, &[rows, cols]);
            let p = random(&mut rng, &[rows, cols]);
            let w = random(&mut rng, &[2 * cols, 1]).map(|v| v * w_scale);
            let mut tape = Tape::new();
            let (cv, pv, wv) = (tape.constant(c.clone()), tape.constant(p.clone()), tape.constant(w));
            let g = compute_gate(&mut tape, cv, pv, wv).unwrap();
            let d = refine(&mut tape, cv, pv, g).unwrap();
            for &v in tape.value(g).data() {
                prop_assert!(v > 0.0 && v < 1.0);
            }
            for ((&x, &a), &b) in tape.value(d).data().iter().zip(c.data()).zip(p.data()) {
                prop_assert!(x >= a.min(b) && x <= a.max(b));
            }
        }

        #[test]
        fn refine_moves_at_most_gate_change(seed in any::<u64>(), g0 in 0.0f64..1.0, dg in -0.5f64..0.5) {
            let g1 = (g0 + dg).clamp(0.0, 1.0);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let c = random(&mut rng, &[1, 4]);
            let p = random(&mut rng, &[1, 4]);
            let mut tape = Tape::new();
            let (cv, pv) = (tape.constant(c.clone()), tape.constant(p.clone()));
            let ga = tape.constant(Tensor::scalar(g0));
            let gb = tape.constant(Tensor::scalar(g1));
            let da = refine(&mut tape, cv, pv, ga).unwrap();
            let db = refine(&mut tape, cv, pv, gb).unwrap();
            for k in 0..4 {
                let moved = (tape.value(da).data()[k] - tape.value(db).data()[k]).abs();
                let bound = (g1 - g0).abs() * (c.data()[k] - p.data()[k]).abs();
                prop_assert!(moved <= bound + 1e-12);
            }
        }

        #[test]
        fn kernel_is_symmetric(seed in any::<u64>(), dim in 1usize..6) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = random(&mut rng, &[1, dim]);
            let y = random(&mut rng, &[1, dim]);
            prop_assert_eq!(
                gaussian_kernel(x.data(), y.data(), 1.3).unwrap(),
                gaussian_kernel(y.data(), x.data(), 1.3).unwrap()
            );
        }
    }
}
