//! Multi-scale flow assembly: configuration, the layer stack, exact
//! log-likelihood, and sampling by inversion.
//!
//! A model is `levels` blocks of `[squeeze, (actnorm -> permutation ->
//! coupling) x steps, split]`, with the split omitted on the last level. The
//! permutation slot is selectable: a dense 1x1 convolution or one of the
//! low-rank Woodbury transforms. Inputs that are spatially 1x1 with a single
//! level skip the squeeze (and have no split); that is the only layout that
//! admits such inputs, and it is what the 2-d quadrature diagnostics use.
//!
//! Parameters live in a [`ParamStore`] owned by the model but passed
//! explicitly to the tape-facing entry points, so callers (gradient checks,
//! optimizers) can substitute a modified copy without rebuilding the stack.

use crate::autodiff::{NodeId, ParamStore, Tape};
use crate::error::{Error, Result};
use crate::layers::{ln_2pi, ActNorm, Conv1x1, Coupling, MeWoodbury, Split, Squeeze, Woodbury};
use crate::rng::{self, STREAM_SAMPLE};
use crate::tensor::Tensor;
use crate::Real;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PermutationKind {
    Conv1x1,
    Woodbury,
    MeWoodbury,
}

impl PermutationKind {
    pub fn name(self) -> &'static str {
        match self {
            PermutationKind::Conv1x1 => "conv1x1",
            PermutationKind::Woodbury => "woodbury",
            PermutationKind::MeWoodbury => "me_woodbury",
        }
    }
}

impl std::str::FromStr for PermutationKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<PermutationKind> {
        match s {
            "conv1x1" => Ok(PermutationKind::Conv1x1),
            "woodbury" => Ok(PermutationKind::Woodbury),
            "me_woodbury" => Ok(PermutationKind::MeWoodbury),
            other => Err(Error::Config(format!(
                "unknown permutation kind {other:?}; expected conv1x1, woodbury, or me_woodbury"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FlowConfig {
    pub levels: usize,
    pub steps: usize,
    /// Hidden width of the coupling conditioner net.
    pub coupling_channels: usize,
    pub permutation: PermutationKind,
    /// Input shape as (channels, height, width).
    pub in_shape: (usize, usize, usize),
    /// Bit depth of the quantized inputs (inputs are scaled to [0,1)).
    pub bits: u32,
    /// Per-level low-rank dimensions. `None` falls back to the built-in
    /// schedule for 3..=6 levels; other level counts must set them.
    pub d_c: Option<Vec<usize>>,
    pub d_s: Option<Vec<usize>>,
    pub d_h: Option<Vec<usize>>,
    pub d_w: Option<Vec<usize>>,
}

fn default_channel_ranks(levels: usize) -> Option<Vec<usize>> {
    match levels {
        3 => Some(vec![8, 8, 16]),
        4 => Some(vec![8, 8, 16, 16]),
        5 => Some(vec![8, 8, 16, 16, 16]),
        6 => Some(vec![8, 8, 16, 16, 16, 16]),
        _ => None,
    }
}

fn default_spatial_ranks(levels: usize) -> Option<Vec<usize>> {
    match levels {
        3 => Some(vec![16, 16, 8]),
        4 => Some(vec![16, 16, 8, 8]),
        5 => Some(vec![16, 16, 16, 8, 8]),
        6 => Some(vec![16, 16, 16, 16, 8, 8]),
        _ => None,
    }
}

impl FlowConfig {
    /// True when the stack is built without a squeeze: a spatially 1x1
    /// single-level model (the only legal 1x1 layout).
    pub fn skips_squeeze(&self) -> bool {
        self.levels == 1 && self.in_shape.1 == 1 && self.in_shape.2 == 1
    }

    pub fn validate(&self) -> Result<()> {
        let (c, h, w) = self.in_shape;
        if c == 0 || h == 0 || w == 0 {
            return Err(Error::Config(format!(
                "input shape {c}x{h}x{w} has a zero extent"
            )));
        }
        if self.levels == 0 {
            return Err(Error::Config("levels must be at least 1".into()));
        }
        if self.steps == 0 {
            return Err(Error::Config("steps must be at least 1".into()));
        }
        if self.coupling_channels == 0 {
            return Err(Error::Config("coupling_channels must be at least 1".into()));
        }
        if self.bits == 0 || self.bits > 8 {
            return Err(Error::Config(format!(
                "bits must be in 1..=8, got {}",
                self.bits
            )));
        }
        if !self.skips_squeeze() {
            let div = 1usize << self.levels;
            if h % div != 0 || w % div != 0 {
                return Err(Error::Config(format!(
                    "spatial size {h}x{w} must be divisible by 2^levels = {div}"
                )));
            }
        }
        for (name, list) in [
            ("d_c", &self.d_c),
            ("d_s", &self.d_s),
            ("d_h", &self.d_h),
            ("d_w", &self.d_w),
        ] {
            if let Some(list) = list {
                if list.len() != self.levels {
                    return Err(Error::Config(format!(
                        "{name} has {} entries but the model has {} levels",
                        list.len(),
                        self.levels
                    )));
                }
            }
        }
        match self.permutation {
            PermutationKind::Conv1x1 => {}
            PermutationKind::Woodbury => {
                self.resolved_ranks("d_c", &self.d_c, default_channel_ranks)?;
                self.resolved_ranks("d_s", &self.d_s, default_spatial_ranks)?;
            }
            PermutationKind::MeWoodbury => {
                self.resolved_ranks("d_c", &self.d_c, default_channel_ranks)?;
                self.resolved_ranks("d_h", &self.d_h, default_spatial_ranks)?;
                self.resolved_ranks("d_w", &self.d_w, default_spatial_ranks)?;
            }
        }
        Ok(())
    }

    fn resolved_ranks(
        &self,
        name: &str,
        explicit: &Option<Vec<usize>>,
        fallback: fn(usize) -> Option<Vec<usize>>,
    ) -> Result<Vec<usize>> {
        if let Some(list) = explicit {
            return Ok(list.clone());
        }
        fallback(self.levels).ok_or_else(|| {
            Error::Config(format!(
                "no built-in {name} schedule for {} levels; set it explicitly",
                self.levels
            ))
        })
    }

    /// Total input dimension c*h*w.
    pub fn dims(&self) -> usize {
        self.in_shape.0 * self.in_shape.1 * self.in_shape.2
    }
}

pub enum FlowLayer {
    ActNorm(ActNorm),
    Conv1x1(Conv1x1),
    Woodbury(Woodbury),
    MeWoodbury(MeWoodbury),
    Coupling(Coupling),
    Squeeze(Squeeze),
    Split(Split),
}

impl FlowLayer {
    pub fn label(&self) -> &str {
        match self {
            FlowLayer::ActNorm(l) => l.label(),
            FlowLayer::Conv1x1(l) => l.label(),
            FlowLayer::Woodbury(l) => l.label(),
            FlowLayer::MeWoodbury(l) => l.label(),
            FlowLayer::Coupling(l) => l.label(),
            FlowLayer::Squeeze(_) => "squeeze",
            FlowLayer::Split(l) => l.label(),
        }
    }
}

/// Tape handles from a full forward pass.
pub struct ForwardNodes {
    pub z_final: NodeId,
    /// Factored-out halves, in the order their splits occur.
    pub factored: Vec<NodeId>,
    /// Sum of per-layer log-determinants, shape (b,).
    pub logdet: NodeId,
    /// Sum of split-prior log-densities, shape (b,).
    pub prior_logp: NodeId,
    /// Total log p(x) = base + priors + logdet, shape (b,).
    pub logp: NodeId,
}

/// Plain-value latents from [`FlowModel::forward_latents`].
pub struct Latents {
    pub z_final: Tensor,
    pub factored: Vec<Tensor>,
}

pub struct QuadratureReport {
    /// Mass from the fine grid (the reported estimate).
    pub mass: Real,
    /// Mass from the half-resolution grid, for the stability check.
    pub coarse_mass: Real,
    pub center: [Real; 2],
    pub halfwidth: [Real; 2],
    /// False when the estimate moved by 1e-4 or more under refinement,
    /// i.e. the grid is too coarse to trust.
    pub stable: bool,
}

pub struct FlowModel {
    pub cfg: FlowConfig,
    pub store: ParamStore,
    pub layers: Vec<FlowLayer>,
    final_shape: (usize, usize, usize),
    factored_shapes: Vec<(usize, usize, usize)>,
}

pub fn build_model<R: Rng>(cfg: FlowConfig, rng: &mut R) -> Result<FlowModel> {
    cfg.validate()?;
    let use_squeeze = !cfg.skips_squeeze();
    let d_c;
    let d_s;
    let d_h;
    let d_w;
    match cfg.permutation {
        PermutationKind::Conv1x1 => {
            d_c = Vec::new();
            d_s = Vec::new();
            d_h = Vec::new();
            d_w = Vec::new();
        }
        PermutationKind::Woodbury => {
            d_c = cfg.resolved_ranks("d_c", &cfg.d_c, default_channel_ranks)?;
            d_s = cfg.resolved_ranks("d_s", &cfg.d_s, default_spatial_ranks)?;
            d_h = Vec::new();
            d_w = Vec::new();
        }
        PermutationKind::MeWoodbury => {
            d_c = cfg.resolved_ranks("d_c", &cfg.d_c, default_channel_ranks)?;
            d_s = Vec::new();
            d_h = cfg.resolved_ranks("d_h", &cfg.d_h, default_spatial_ranks)?;
            d_w = cfg.resolved_ranks("d_w", &cfg.d_w, default_spatial_ranks)?;
        }
    }

    let mut store = ParamStore::new();
    let mut layers = Vec::new();
    let mut factored_shapes = Vec::new();
    let (mut c, mut h, mut w) = cfg.in_shape;

    for level in 1..=cfg.levels {
        if use_squeeze {
            layers.push(FlowLayer::Squeeze(Squeeze));
            c *= 4;
            h /= 2;
            w /= 2;
        }
        for step in 1..=cfg.steps {
            let prefix = format!("l{level}.s{step}");
            layers.push(FlowLayer::ActNorm(ActNorm::new(
                &mut store,
                &format!("{prefix}.actnorm"),
                c,
            )));
            let lv = level - 1;
            match cfg.permutation {
                PermutationKind::Conv1x1 => {
                    layers.push(FlowLayer::Conv1x1(Conv1x1::new(
                        &mut store,
                        rng,
                        &format!("{prefix}.conv1x1"),
                        c,
                    )));
                }
                PermutationKind::Woodbury => {
                    layers.push(FlowLayer::Woodbury(Woodbury::new(
                        &mut store,
                        rng,
                        &format!("{prefix}.woodbury"),
                        c,
                        h,
                        w,
                        d_c[lv],
                        d_s[lv],
                    )?));
                }
                PermutationKind::MeWoodbury => {
                    layers.push(FlowLayer::MeWoodbury(MeWoodbury::new(
                        &mut store,
                        rng,
                        &format!("{prefix}.me_woodbury"),
                        c,
                        h,
                        w,
                        d_c[lv],
                        d_h[lv],
                        d_w[lv],
                    )?));
                }
            }
            layers.push(FlowLayer::Coupling(Coupling::new(
                &mut store,
                rng,
                &format!("{prefix}.coupling"),
                c,
                cfg.coupling_channels,
            )?));
        }
        if level < cfg.levels {
            let split = Split::new(&mut store, rng, &format!("l{level}.split"), c)?;
            layers.push(FlowLayer::Split(split));
            c /= 2;
            factored_shapes.push((c, h, w));
        }
    }

    Ok(FlowModel {
        cfg,
        store,
        layers,
        final_shape: (c, h, w),
        factored_shapes,
    })
}

impl FlowModel {
    /// Shape (c,h,w) of the final latent block.
    pub fn final_shape(&self) -> (usize, usize, usize) {
        self.final_shape
    }

    /// Shapes (c,h,w) of the factored-out latents, in split order.
    pub fn factored_shapes(&self) -> &[(usize, usize, usize)] {
        &self.factored_shapes
    }

    pub fn actnorms_initialized(&self) -> bool {
        self.layers.iter().all(|l| match l {
            FlowLayer::ActNorm(a) => a.is_initialized(),
            _ => true,
        })
    }

    /// Mark every actnorm as initialized without touching its parameters.
    /// For restoring serialized models, where the stored scale/bias already
    /// embed the data-dependent init.
    pub fn mark_actnorms_initialized(&mut self) {
        for l in &mut self.layers {
            if let FlowLayer::ActNorm(a) = l {
                a.set_initialized(true);
            }
        }
    }

    fn check_input(&self, x: &Tensor) -> Result<usize> {
        let (c, h, w) = self.cfg.in_shape;
        let s = x.shape();
        if s.len() != 4 || s[1] != c || s[2] != h || s[3] != w || s[0] == 0 {
            return Err(Error::Shape(format!(
                "expected a (b,{c},{h},{w}) batch, got {s:?}"
            )));
        }
        Ok(s[0])
    }

    /// Run the full stack on a tape. `store` usually is `&self.store`, but a
    /// modified copy may be substituted (gradient checks do).
    pub fn forward_nodes(
        &self,
        store: &ParamStore,
        tape: &mut Tape,
        x: NodeId,
    ) -> Result<ForwardNodes> {
        let b = self.check_input(tape.value(x))?;
        let mut cur = x;
        let mut logdet = tape.leaf(Tensor::zeros(&[b]));
        let mut prior_logp = tape.leaf(Tensor::zeros(&[b]));
        let mut factored = Vec::with_capacity(self.factored_shapes.len());

        for (idx, layer) in self.layers.iter().enumerate() {
            let mut ld = None;
            match layer {
                FlowLayer::ActNorm(l) => {
                    let (y, d) = l.forward(store, tape, cur)?;
                    cur = y;
                    ld = Some(d);
                }
                FlowLayer::Conv1x1(l) => {
                    let (y, d) = l.forward(store, tape, cur)?;
                    cur = y;
                    ld = Some(d);
                }
                FlowLayer::Woodbury(l) => {
                    let (y, d) = l.forward(store, tape, cur)?;
                    cur = y;
                    ld = Some(d);
                }
                FlowLayer::MeWoodbury(l) => {
                    let (y, d) = l.forward(store, tape, cur)?;
                    cur = y;
                    ld = Some(d);
                }
                FlowLayer::Coupling(l) => {
                    let (y, d) = l.forward(store, tape, cur)?;
                    cur = y;
                    ld = Some(d);
                }
                FlowLayer::Squeeze(l) => {
                    let (y, _) = l.forward(tape, cur)?;
                    cur = y;
                }
                FlowLayer::Split(l) => {
                    let out = l.forward(store, tape, cur)?;
                    factored.push(out.z_b);
                    prior_logp = tape.add(prior_logp, out.logp)?;
                    cur = out.z_a;
                }
            }
            if let Some(d) = ld {
                logdet = tape.add(logdet, d)?;
                if !tape.value(d).all_finite() {
                    return Err(Error::NonFinite(format!(
                        "layer {idx} ({}) produced a non-finite log-determinant",
                        layer.label()
                    )));
                }
            }
            if !tape.value(cur).all_finite() {
                return Err(Error::NonFinite(format!(
                    "layer {idx} ({}) produced a non-finite activation",
                    layer.label()
                )));
            }
        }

        // Base density: standard normal on the final latent block.
        let (cf, hf, wf) = self.final_shape;
        let d_f = (cf * hf * wf) as Real;
        let sq = tape.mul(cur, cur)?;
        let ssq = tape.sum(sq, &[1, 2, 3])?;
        let neg_half = tape.scale(ssq, -0.5)?;
        let base = tape.add_scalar(neg_half, -0.5 * d_f * ln_2pi())?;

        let with_prior = tape.add(base, prior_logp)?;
        let logp = tape.add(with_prior, logdet)?;
        if !tape.value(logp).all_finite() {
            return Err(Error::NonFinite(
                "total log-likelihood is non-finite".into(),
            ));
        }
        Ok(ForwardNodes {
            z_final: cur,
            factored,
            logdet,
            prior_logp,
            logp,
        })
    }

    /// Mean negative log-likelihood in nats over the batch, as a scalar node
    /// suitable for `Tape::backward`.
    pub fn batch_loss_node(
        &self,
        store: &ParamStore,
        tape: &mut Tape,
        x: NodeId,
    ) -> Result<NodeId> {
        let fwd = self.forward_nodes(store, tape, x)?;
        let nll = tape.scale(fwd.logp, -1.0)?;
        tape.mean(nll, &[0])
    }

    /// Per-sample negative log-likelihood in nats and bits-per-dimension.
    pub fn log_likelihood(&self, x: &Tensor) -> Result<(Tensor, Tensor)> {
        let mut tape = Tape::new();
        let xid = tape.leaf(x.clone());
        let fwd = self.forward_nodes(&self.store, &mut tape, xid)?;
        let nll = tape.value(fwd.logp).scale(-1.0);
        let d = self.cfg.dims() as Real;
        let bits = self.cfg.bits as Real;
        let ln2 = std::f64::consts::LN_2 as Real;
        let bpd = nll.map(|v| v / (d * ln2) + bits);
        Ok((nll, bpd))
    }

    /// Forward pass returning plain latent values.
    pub fn forward_latents(&self, x: &Tensor) -> Result<Latents> {
        let mut tape = Tape::new();
        let xid = tape.leaf(x.clone());
        let fwd = self.forward_nodes(&self.store, &mut tape, xid)?;
        Ok(Latents {
            z_final: tape.value(fwd.z_final).clone(),
            factored: fwd
                .factored
                .iter()
                .map(|&id| tape.value(id).clone())
                .collect(),
        })
    }

    /// Exact inverse: reconstruct x from the final latent and the factored
    /// halves (in split order, as produced by [`Self::forward_latents`]).
    pub fn inverse_from_latents(&self, z_final: &Tensor, factored: &[Tensor]) -> Result<Tensor> {
        if factored.len() != self.factored_shapes.len() {
            return Err(Error::Shape(format!(
                "expected {} factored latents, got {}",
                self.factored_shapes.len(),
                factored.len()
            )));
        }
        let mut cur = z_final.clone();
        let mut remaining = factored.len();
        for layer in self.layers.iter().rev() {
            cur = match layer {
                FlowLayer::ActNorm(l) => l.inverse(&self.store, &cur)?,
                FlowLayer::Conv1x1(l) => l.inverse(&self.store, &cur)?,
                FlowLayer::Woodbury(l) => l.inverse(&self.store, &cur)?,
                FlowLayer::MeWoodbury(l) => l.inverse(&self.store, &cur)?,
                FlowLayer::Coupling(l) => l.inverse(&self.store, &cur)?,
                FlowLayer::Squeeze(l) => l.inverse(&cur)?,
                FlowLayer::Split(l) => {
                    remaining -= 1;
                    l.inverse(&cur, &factored[remaining])?
                }
            };
        }
        Ok(cur)
    }

    /// Draw `count` samples at the given temperature: every factored latent
    /// is scaled-normal, then the stack is inverted. Per-sample noise comes
    /// from counter-keyed streams, so sample i is the same no matter how the
    /// batch is sized or sharded.
    pub fn sample(&self, count: usize, temperature: Real, seed: u64) -> Result<Tensor> {
        if temperature < 0.0 {
            return Err(Error::Contract(format!(
                "temperature must be nonnegative, got {temperature}"
            )));
        }
        if count == 0 {
            return Err(Error::Contract("sample count must be positive".into()));
        }
        for layer in &self.layers {
            if let FlowLayer::ActNorm(a) = layer {
                if !a.is_initialized() {
                    return Err(Error::Contract(format!(
                        "{}: actnorm is uninitialized; train first or force identity",
                        a.label()
                    )));
                }
            }
        }
        let mut streams: Vec<ChaCha8Rng> = (0..count)
            .map(|i| rng::stream(seed, STREAM_SAMPLE, i as u64))
            .collect();

        let (cf, hf, wf) = self.final_shape;
        let eps = fill_standard_noise(&mut streams, &[count, cf, hf, wf]);
        let mut cur = eps.scale(temperature);

        let mut remaining = self.factored_shapes.len();
        for layer in self.layers.iter().rev() {
            cur = match layer {
                FlowLayer::ActNorm(l) => l.inverse(&self.store, &cur)?,
                FlowLayer::Conv1x1(l) => l.inverse(&self.store, &cur)?,
                FlowLayer::Woodbury(l) => l.inverse(&self.store, &cur)?,
                FlowLayer::MeWoodbury(l) => l.inverse(&self.store, &cur)?,
                FlowLayer::Coupling(l) => l.inverse(&self.store, &cur)?,
                FlowLayer::Squeeze(l) => l.inverse(&cur)?,
                FlowLayer::Split(l) => {
                    remaining -= 1;
                    let (c_b, h_b, w_b) = self.factored_shapes[remaining];
                    let eps = fill_standard_noise(&mut streams, &[count, c_b, h_b, w_b]);
                    let z_b = l.draw(&self.store, &cur, temperature, &eps)?;
                    l.inverse(&cur, &z_b)?
                }
            };
        }
        Ok(cur)
    }

    /// Data-dependent actnorm initialization: walk the stack forward on
    /// `batch`, initializing each actnorm from the activations reaching it.
    pub fn initialize_actnorms(&mut self, batch: &Tensor) -> Result<()> {
        self.check_input(batch)?;
        let mut cur = batch.clone();
        let store = &mut self.store;
        for layer in &mut self.layers {
            if let FlowLayer::ActNorm(l) = layer {
                if !l.is_initialized() {
                    l.initialize(store, &cur)?;
                }
            }
            cur = forward_value(layer, store, &cur)?;
        }
        Ok(())
    }

    /// Reset every layer to an exact identity (and the split priors to
    /// standard normal). Marks actnorms initialized. Diagnostic helper: the
    /// resulting model maps x to itself up to the squeeze reshufflings, with
    /// zero total log-determinant.
    pub fn force_identity(&mut self) -> Result<()> {
        let store = &mut self.store;
        for layer in &mut self.layers {
            match layer {
                FlowLayer::ActNorm(l) => l.force_identity(store)?,
                FlowLayer::Conv1x1(l) => l.force_identity(store)?,
                FlowLayer::Woodbury(l) => l.force_identity(store)?,
                FlowLayer::MeWoodbury(l) => l.force_identity(store)?,
                FlowLayer::Coupling(l) => l.force_identity(store)?,
                FlowLayer::Squeeze(_) => {}
                FlowLayer::Split(l) => l.force_identity(store)?,
            }
        }
        Ok(())
    }

    /// Add N(0, std^2) noise to every parameter. Benchmark/diagnostic helper
    /// for exercising a model away from its (near-)identity initialization
    /// without training. Apply after any actnorm initialization.
    pub fn perturb_params<R: Rng>(&mut self, rng: &mut R, std: Real) {
        let ids: Vec<_> = self.store.ids().collect();
        let dist = rand_distr::Normal::new(0.0, std as f64).expect("valid std");
        for id in ids {
            let mut t = self.store.get(id).clone();
            for v in t.data_mut() {
                *v += rng.sample::<f64, _>(dist) as Real;
            }
            self.store.set(id, t).expect("same shape");
        }
    }

    /// Trapezoid quadrature of exp(log p) for a 2-dimensional model (input
    /// shape 2x1x1), over a grid covering +-8 pushforward standard
    /// deviations per coordinate. `points_per_axis` is the coarse grid; the
    /// reported mass uses the doubled grid and the pair decides stability.
    pub fn density_normalization_check(&self, points_per_axis: usize) -> Result<QuadratureReport> {
        if self.cfg.in_shape != (2, 1, 1) {
            return Err(Error::Contract(format!(
                "normalization check needs a 2x1x1 input shape, got {:?}",
                self.cfg.in_shape
            )));
        }
        if points_per_axis < 8 {
            return Err(Error::Contract(
                "normalization check needs at least 8 points per axis".into(),
            ));
        }
        // Locate the pushforward: sample moments with a fixed diagnostic
        // seed so the report is deterministic.
        let probe = self.sample(512, 1.0, 0xD0_5E)?;
        let n_probe = probe.shape()[0] as Real;
        let mut center = [0.0 as Real; 2];
        let mut halfwidth = [0.0 as Real; 2];
        for j in 0..2 {
            let mut mean = 0.0;
            let mut sq = 0.0;
            for i in 0..probe.shape()[0] {
                let v = probe.at(&[i, j, 0, 0]);
                mean += v;
                sq += v * v;
            }
            mean /= n_probe;
            let var = (sq / n_probe - mean * mean).max(1e-12);
            center[j] = mean;
            halfwidth[j] = 8.0 * var.sqrt();
        }

        let coarse_mass = self.grid_mass(points_per_axis, center, halfwidth)?;
        let mass = self.grid_mass(2 * points_per_axis - 1, center, halfwidth)?;
        Ok(QuadratureReport {
            mass,
            coarse_mass,
            center,
            halfwidth,
            stable: (mass - coarse_mass).abs() < 1e-4,
        })
    }

    fn grid_mass(&self, n: usize, center: [Real; 2], halfwidth: [Real; 2]) -> Result<Real> {
        let step = [
            2.0 * halfwidth[0] / (n - 1) as Real,
            2.0 * halfwidth[1] / (n - 1) as Real,
        ];
        let coord = |j: usize, k: usize| center[j] - halfwidth[j] + step[j] * k as Real;
        let trap = |k: usize| if k == 0 || k == n - 1 { 0.5 } else { 1.0 };
        let mut mass = 0.0;
        for i in 0..n {
            let x0 = coord(0, i);
            let mut row = Tensor::zeros(&[n, 2, 1, 1]);
            {
                let data = row.data_mut();
                for k in 0..n {
                    data[2 * k] = x0;
                    data[2 * k + 1] = coord(1, k);
                }
            }
            let (nll, _) = self.log_likelihood(&row)?;
            let mut row_sum = 0.0;
            for k in 0..n {
                row_sum += trap(k) * (-nll.data()[k]).exp();
            }
            mass += trap(i) * row_sum;
        }
        Ok(mass * step[0] * step[1])
    }
}

/// Run one layer forward on plain values via a throwaway tape, following the
/// retained half at splits.
fn forward_value(layer: &FlowLayer, store: &ParamStore, x: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let xid = tape.leaf(x.clone());
    let y = match layer {
        FlowLayer::ActNorm(l) => l.forward(store, &mut tape, xid)?.0,
        FlowLayer::Conv1x1(l) => l.forward(store, &mut tape, xid)?.0,
        FlowLayer::Woodbury(l) => l.forward(store, &mut tape, xid)?.0,
        FlowLayer::MeWoodbury(l) => l.forward(store, &mut tape, xid)?.0,
        FlowLayer::Coupling(l) => l.forward(store, &mut tape, xid)?.0,
        FlowLayer::Squeeze(l) => return l.forward_plain(x),
        FlowLayer::Split(l) => l.forward(store, &mut tape, xid)?.z_a,
    };
    Ok(tape.value(y).clone())
}

fn fill_standard_noise(streams: &mut [ChaCha8Rng], shape: &[usize]) -> Tensor {
    let b = shape[0];
    let per: usize = shape[1..].iter().product();
    let mut t = Tensor::zeros(shape);
    let data = t.data_mut();
    for (i, stream) in streams.iter_mut().enumerate().take(b) {
        for k in 0..per {
            data[i * per + k] = stream.sample::<f64, _>(StandardNormal) as Real;
        }
    }
    t
}
