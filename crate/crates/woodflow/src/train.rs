//! Adam optimizer, the training loop with data-dependent actnorm
//! initialization, and the WFC1 checkpoint container.
//!
//! Checkpoint layout (little-endian):
//!
//! ```text
//! bytes 0..4   magic "WFC1"
//! u32          manifest length
//! ...          manifest: UTF-8 key=value lines (iteration, seed, adam_t,
//!              actnorm_initialized, and the full model config)
//! u32          record count
//! then         per record: u16 name length, name bytes, one NTF tensor
//! ```
//!
//! Records are the parameters in store order ("param.<name>") followed by
//! the Adam moments ("adam_m.<name>", "adam_v.<name>"). Batches are a pure
//! function of (seed, iteration), so seed + iteration in the manifest is the
//! complete RNG state and resume replays the uninterrupted run bitwise.

use crate::autodiff::{Gradients, ParamId, ParamStore, Tape};
use crate::data::{ntf_take, ntf_to_bytes, BatchSource, NtfTensor};
use crate::error::{Error, Result};
use crate::model::{build_model, FlowConfig, FlowModel};
use crate::rng::{self, STREAM_INIT};
use crate::tensor::Tensor;
use crate::Real;
use std::collections::BTreeMap;
use std::fmt;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"WFC1";

/// Adam with bias correction. Moments are stored per parameter, aligned
/// with the store's id order.
pub struct AdamState {
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    t: u64,
    pub alpha: Real,
    pub beta1: Real,
    pub beta2: Real,
    pub eps: Real,
}

impl AdamState {
    pub fn new(store: &ParamStore) -> AdamState {
        let zeros: Vec<Tensor> = store
            .ids()
            .map(|id| Tensor::zeros(store.get(id).shape()))
            .collect();
        AdamState {
            m: zeros.clone(),
            v: zeros,
            t: 0,
            alpha: 0.001,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn t(&self) -> u64 {
        self.t
    }

    /// One update. `grads[i]` pairs with the i-th parameter in store order.
    /// All gradients are validated before anything is mutated, so a rejected
    /// step leaves parameters and moments untouched.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[Tensor]) -> Result<()> {
        if grads.len() != store.len() {
            return Err(Error::Contract(format!(
                "got {} gradients for {} parameters",
                grads.len(),
                store.len()
            )));
        }
        for (id, g) in store.ids().zip(grads) {
            if g.shape() != store.get(id).shape() {
                return Err(Error::Shape(format!(
                    "gradient for {} has shape {:?}, parameter has {:?}",
                    store.name(id),
                    g.shape(),
                    store.get(id).shape()
                )));
            }
            if !g.all_finite() {
                return Err(Error::NonFinite(format!(
                    "gradient for parameter {} is not finite",
                    store.name(id)
                )));
            }
        }

        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (slot, id) in store.ids().enumerate() {
            let g = grads[slot].data();
            let mut theta = store.get(id).clone();
            let m = self.m[slot].data_mut();
            let v = self.v[slot].data_mut();
            for (k, th) in theta.data_mut().iter_mut().enumerate() {
                m[k] = self.beta1 * m[k] + (1.0 - self.beta1) * g[k];
                v[k] = self.beta2 * v[k] + (1.0 - self.beta2) * g[k] * g[k];
                let m_hat = m[k] / bc1;
                let v_hat = v[k] / bc2;
                *th -= self.alpha * m_hat / (v_hat.sqrt() + self.eps);
            }
            store.set(id, theta)?;
        }
        Ok(())
    }
}

/// One logged training iteration, as printed: `iter nll_nats bpd gradnorm`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricsRow {
    pub iter: u64,
    pub nll_nats: Real,
    pub bpd: Real,
    pub grad_norm: Real,
}

impl fmt::Display for MetricsRow {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} {:.6} {:.6} {:.6}",
            self.iter, self.nll_nats, self.bpd, self.grad_norm
        )
    }
}

pub struct TrainOptions {
    /// Steps to execute in this call (a resumed trainer continues counting
    /// from its checkpoint iteration).
    pub iterations: u64,
    pub batch_size: usize,
    /// Data-parallel gradient workers; 1 is serial and bitwise reproducible.
    pub threads: usize,
    /// Write a numbered checkpoint every this many iterations (0 = only the
    /// final one). Needs `out_dir`.
    pub checkpoint_every: u64,
    pub out_dir: Option<PathBuf>,
}

impl Default for TrainOptions {
    fn default() -> TrainOptions {
        TrainOptions {
            iterations: 0,
            batch_size: 64,
            threads: 1,
            checkpoint_every: 0,
            out_dir: None,
        }
    }
}

/// A model mid-training: parameters, optimizer moments, and the iteration
/// counter that keys the batch stream.
pub struct Trainer {
    pub model: FlowModel,
    adam: AdamState,
    iteration: u64,
    seed: u64,
}

impl Trainer {
    pub fn new(model: FlowModel, seed: u64) -> Trainer {
        let adam = AdamState::new(&model.store);
        Trainer {
            model,
            adam,
            iteration: 0,
            seed,
        }
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Trainer> {
        ck.restore()
    }

    pub fn iteration(&self) -> u64 {
        self.iteration
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint::capture(self)
    }

    /// Run `opts.iterations` steps, logging one row per step. On a fresh
    /// model, actnorms are initialized from the first batch before step 1;
    /// this happens even for a 0-iteration run. A failing step aborts with
    /// the last good state checkpointed (when `out_dir` is set) and the
    /// error returned.
    pub fn run(
        &mut self,
        source: &dyn BatchSource,
        opts: &TrainOptions,
        log: &mut dyn FnMut(&MetricsRow),
    ) -> Result<Vec<MetricsRow>> {
        if source.is_empty() {
            return Err(Error::Data("training dataset is empty".into()));
        }
        if opts.threads == 0 {
            return Err(Error::Config("threads must be at least 1".into()));
        }
        if source.sample_shape() != self.model.cfg.in_shape {
            return Err(Error::Shape(format!(
                "dataset samples are {:?}, model expects {:?}",
                source.sample_shape(),
                self.model.cfg.in_shape
            )));
        }

        if !self.model.actnorms_initialized() {
            let first = source.batch(self.iteration, opts.batch_size)?;
            self.model.initialize_actnorms(&first)?;
        }

        let mut rows = Vec::with_capacity(opts.iterations as usize);
        for _ in 0..opts.iterations {
            let row = match self.step(source, opts) {
                Ok(row) => row,
                Err(e) => {
                    if let Some(dir) = &opts.out_dir {
                        // Best effort: the training failure is the primary
                        // error even if the disk write also fails.
                        let _ = self.checkpoint().save(dir.join("ckpt_last_good.wfc"));
                    }
                    return Err(e);
                }
            };
            log(&row);
            rows.push(row);
            if opts.checkpoint_every > 0 && self.iteration % opts.checkpoint_every == 0 {
                if let Some(dir) = &opts.out_dir {
                    self.checkpoint()
                        .save(dir.join(format!("ckpt_{:06}.wfc", self.iteration)))?;
                }
            }
        }
        if let Some(dir) = &opts.out_dir {
            self.checkpoint().save(dir.join("ckpt_final.wfc"))?;
        }
        Ok(rows)
    }

    fn step(&mut self, source: &dyn BatchSource, opts: &TrainOptions) -> Result<MetricsRow> {
        let batch = source.batch(self.iteration, opts.batch_size)?;
        let ids: Vec<ParamId> = self.model.store.ids().collect();
        let (nll, grads) = if opts.threads <= 1 || batch.shape()[0] < 2 {
            grad_pass(&self.model, &batch, &ids)?
        } else {
            sharded_grad_pass(&self.model, &batch, &ids, opts.threads)?
        };
        let grad_norm = grads
            .iter()
            .map(|g| g.data().iter().map(|x| x * x).sum::<Real>())
            .sum::<Real>()
            .sqrt();
        self.adam.step(&mut self.model.store, &grads)?;
        self.iteration += 1;

        let d = self.model.cfg.dims() as Real;
        let ln2 = std::f64::consts::LN_2 as Real;
        Ok(MetricsRow {
            iter: self.iteration,
            nll_nats: nll,
            bpd: nll / (d * ln2) + self.model.cfg.bits as Real,
            grad_norm,
        })
    }
}

/// Mean batch NLL and its gradient for every parameter, in id order.
fn grad_pass(model: &FlowModel, batch: &Tensor, ids: &[ParamId]) -> Result<(Real, Vec<Tensor>)> {
    let mut tape = Tape::new();
    let x = tape.leaf(batch.clone());
    let loss = model.batch_loss_node(&model.store, &mut tape, x)?;
    let nll = tape.value(loss).item()?;
    let grads = tape.backward(loss)?;
    Ok((nll, collect_grads(model, &grads, ids)?))
}

fn collect_grads(model: &FlowModel, grads: &Gradients, ids: &[ParamId]) -> Result<Vec<Tensor>> {
    ids.iter()
        .map(|&id| {
            grads.get(id).cloned().ok_or_else(|| {
                Error::Contract(format!(
                    "parameter {} received no gradient",
                    model.store.name(id)
                ))
            })
        })
        .collect()
}

/// Split the batch across worker threads, each with its own tape, and
/// combine shard gradients as a size-weighted sum in shard order (so the
/// result is deterministic for a fixed thread count).
fn sharded_grad_pass(
    model: &FlowModel,
    batch: &Tensor,
    ids: &[ParamId],
    threads: usize,
) -> Result<(Real, Vec<Tensor>)> {
    let b = batch.shape()[0];
    let shards = split_rows(batch, threads.min(b))?;
    let results: Vec<Result<(Real, Vec<Tensor>)>> = std::thread::scope(|s| {
        let handles: Vec<_> = shards
            .iter()
            .map(|shard| s.spawn(move || grad_pass(model, shard, ids)))
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("gradient worker panicked"))
            .collect()
    });

    let mut nll = 0.0;
    let mut acc: Vec<Tensor> = ids
        .iter()
        .map(|&id| Tensor::zeros(model.store.get(id).shape()))
        .collect();
    for (shard, result) in shards.iter().zip(results) {
        let weight = shard.shape()[0] as Real / b as Real;
        let (shard_nll, shard_grads) = result?;
        nll += weight * shard_nll;
        for (a, g) in acc.iter_mut().zip(&shard_grads) {
            for (x, y) in a.data_mut().iter_mut().zip(g.data()) {
                *x += weight * y;
            }
        }
    }
    Ok((nll, acc))
}

fn split_rows(batch: &Tensor, parts: usize) -> Result<Vec<Tensor>> {
    let s = batch.shape();
    let (b, rest) = (s[0], &s[1..]);
    let per: usize = rest.iter().product();
    let base = b / parts;
    let extra = b % parts;
    let mut out = Vec::with_capacity(parts);
    let mut start = 0;
    for i in 0..parts {
        let rows = base + usize::from(i < extra);
        let mut shape = vec![rows];
        shape.extend_from_slice(rest);
        out.push(Tensor::new(
            shape,
            batch.data()[start * per..(start + rows) * per].to_vec(),
        )?);
        start += rows;
    }
    Ok(out)
}

/// Everything needed to resume training or evaluate a trained model.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub cfg: FlowConfig,
    pub iteration: u64,
    pub seed: u64,
    pub adam_t: u64,
    pub actnorm_initialized: bool,
    params: Vec<(String, Tensor)>,
    adam_m: Vec<Tensor>,
    adam_v: Vec<Tensor>,
}

impl Checkpoint {
    fn capture(tr: &Trainer) -> Checkpoint {
        Checkpoint {
            cfg: tr.model.cfg.clone(),
            iteration: tr.iteration,
            seed: tr.seed,
            adam_t: tr.adam.t,
            actnorm_initialized: tr.model.actnorms_initialized(),
            params: tr
                .model
                .store
                .iter()
                .map(|(_, name, value)| (name.to_string(), value.clone()))
                .collect(),
            adam_m: tr.adam.m.clone(),
            adam_v: tr.adam.v.clone(),
        }
    }

    /// Rebuild the trainer: construct the model from the config echo, then
    /// overwrite every parameter and optimizer moment from the records.
    pub fn restore(&self) -> Result<Trainer> {
        let mut build_rng = rng::stream(self.seed, STREAM_INIT, 0);
        let mut model = build_model(self.cfg.clone(), &mut build_rng)?;
        let ids: Vec<ParamId> = model.store.ids().collect();
        if ids.len() != self.params.len() {
            return Err(Error::Data(format!(
                "checkpoint has {} parameters, the configured model has {}",
                self.params.len(),
                ids.len()
            )));
        }
        for (&id, (name, value)) in ids.iter().zip(&self.params) {
            if model.store.name(id) != name {
                return Err(Error::Data(format!(
                    "checkpoint parameter {name:?} does not match model parameter {:?}",
                    model.store.name(id)
                )));
            }
            model.store.set(id, value.clone())?;
        }
        if self.actnorm_initialized {
            model.mark_actnorms_initialized();
        }

        let mut adam = AdamState::new(&model.store);
        for ((m, v), (name, p)) in self.adam_m.iter().zip(&self.adam_v).zip(&self.params) {
            if m.shape() != p.shape() || v.shape() != p.shape() {
                return Err(Error::Data(format!(
                    "optimizer moments for {name:?} do not match the parameter shape"
                )));
            }
        }
        adam.m = self.adam_m.clone();
        adam.v = self.adam_v.clone();
        adam.t = self.adam_t;

        Ok(Trainer {
            model,
            adam,
            iteration: self.iteration,
            seed: self.seed,
        })
    }

    /// The model alone, for evaluation and sampling.
    pub fn build_model(&self) -> Result<FlowModel> {
        Ok(self.restore()?.model)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut manifest = String::new();
        let cfg = &self.cfg;
        let _ = writeln!(manifest, "iteration={}", self.iteration);
        let _ = writeln!(manifest, "seed={}", self.seed);
        let _ = writeln!(manifest, "adam_t={}", self.adam_t);
        let _ = writeln!(manifest, "actnorm_initialized={}", self.actnorm_initialized);
        let _ = writeln!(manifest, "levels={}", cfg.levels);
        let _ = writeln!(manifest, "steps={}", cfg.steps);
        let _ = writeln!(manifest, "coupling_channels={}", cfg.coupling_channels);
        let _ = writeln!(manifest, "permutation={}", cfg.permutation.name());
        let _ = writeln!(
            manifest,
            "in_shape={},{},{}",
            cfg.in_shape.0, cfg.in_shape.1, cfg.in_shape.2
        );
        let _ = writeln!(manifest, "bits={}", cfg.bits);
        for (key, ranks) in [
            ("d_c", &cfg.d_c),
            ("d_s", &cfg.d_s),
            ("d_h", &cfg.d_h),
            ("d_w", &cfg.d_w),
        ] {
            if let Some(list) = ranks {
                let _ = writeln!(manifest, "{key}={}", join_usize(list));
            }
        }

        let mut out = Vec::new();
        out.extend_from_slice(&CHECKPOINT_MAGIC);
        out.extend_from_slice(&(manifest.len() as u32).to_le_bytes());
        out.extend_from_slice(manifest.as_bytes());

        let total = 3 * self.params.len();
        out.extend_from_slice(&(total as u32).to_le_bytes());
        let groups = [
            ("param", None),
            ("adam_m", Some(&self.adam_m)),
            ("adam_v", Some(&self.adam_v)),
        ];
        for (prefix, tensors) in groups {
            for (i, (name, value)) in self.params.iter().enumerate() {
                let tensor = tensors.map_or(value, |ts| &ts[i]);
                let record = format!("{prefix}.{name}");
                if record.len() > u16::MAX as usize {
                    return Err(Error::Data(format!(
                        "record name {record:?} is too long for the container"
                    )));
                }
                out.extend_from_slice(&(record.len() as u16).to_le_bytes());
                out.extend_from_slice(record.as_bytes());
                out.extend_from_slice(&ntf_to_bytes(&NtfTensor::from_real(tensor))?);
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
        let fail =
            |offset: usize, what: &str| Error::Data(format!("{what} at byte {offset}"));
        if bytes.len() < 8 {
            return Err(fail(bytes.len(), "truncated checkpoint header"));
        }
        if bytes[..4] != CHECKPOINT_MAGIC {
            return Err(fail(0, "bad checkpoint magic (expected \"WFC1\")"));
        }
        let mlen = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
        if 8 + mlen + 4 > bytes.len() {
            return Err(fail(8, "truncated checkpoint manifest"));
        }
        let manifest = std::str::from_utf8(&bytes[8..8 + mlen])
            .map_err(|_| fail(8, "checkpoint manifest is not UTF-8"))?;
        let mut fields = BTreeMap::new();
        for line in manifest.lines() {
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Data(format!("manifest line {line:?} is not key=value"))
            })?;
            if fields.insert(key.to_string(), value.to_string()).is_some() {
                return Err(Error::Data(format!("manifest repeats key {key:?}")));
            }
        }

        let mut off = 8 + mlen;
        let count =
            u32::from_le_bytes(bytes[off..off + 4].try_into().unwrap()) as usize;
        off += 4;
        let mut records: Vec<(String, Tensor)> = Vec::with_capacity(count);
        for _ in 0..count {
            if off + 2 > bytes.len() {
                return Err(fail(off, "truncated record name length"));
            }
            let nlen =
                u16::from_le_bytes(bytes[off..off + 2].try_into().unwrap()) as usize;
            off += 2;
            if off + nlen > bytes.len() {
                return Err(fail(off, "truncated record name"));
            }
            let name = std::str::from_utf8(&bytes[off..off + nlen])
                .map_err(|_| fail(off, "record name is not UTF-8"))?
                .to_string();
            off += nlen;
            let (blob, used) = ntf_take(&bytes[off..])?;
            off += used;
            records.push((name, blob.to_real()?));
        }
        if off != bytes.len() {
            return Err(fail(
                off,
                &format!("{} trailing bytes after the last record", bytes.len() - off),
            ));
        }

        let get = |key: &str| -> Result<&String> {
            fields
                .get(key)
                .ok_or_else(|| Error::Data(format!("checkpoint manifest is missing {key}")))
        };
        fn num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
            value.parse().map_err(|_| {
                Error::Data(format!("manifest value {key}={value} is not a number"))
            })
        }
        fn num_list(key: &str, value: &str) -> Result<Vec<usize>> {
            value.split(',').map(|p| num(key, p.trim())).collect()
        }

        let in_shape = num_list("in_shape", get("in_shape")?)?;
        if in_shape.len() != 3 {
            return Err(Error::Data(format!(
                "manifest in_shape must have 3 entries, got {}",
                in_shape.len()
            )));
        }
        let opt_list = |key: &str| -> Result<Option<Vec<usize>>> {
            fields.get(key).map(|v| num_list(key, v)).transpose()
        };
        let cfg = FlowConfig {
            levels: num("levels", get("levels")?)?,
            steps: num("steps", get("steps")?)?,
            coupling_channels: num("coupling_channels", get("coupling_channels")?)?,
            permutation: get("permutation")?.parse()?,
            in_shape: (in_shape[0], in_shape[1], in_shape[2]),
            bits: num("bits", get("bits")?)?,
            d_c: opt_list("d_c")?,
            d_s: opt_list("d_s")?,
            d_h: opt_list("d_h")?,
            d_w: opt_list("d_w")?,
        };

        if records.len() % 3 != 0 {
            return Err(Error::Data(format!(
                "expected parameter/adam_m/adam_v record triples, got {} records",
                records.len()
            )));
        }
        let n = records.len() / 3;
        let mut params = Vec::with_capacity(n);
        let mut adam_m = Vec::with_capacity(n);
        let mut adam_v = Vec::with_capacity(n);
        for (i, (name, value)) in records.into_iter().enumerate() {
            let (expect_prefix, base) = match i / n {
                0 => ("param.", None),
                1 => ("adam_m.", Some(i - n)),
                _ => ("adam_v.", Some(i - 2 * n)),
            };
            let stripped = name.strip_prefix(expect_prefix).ok_or_else(|| {
                Error::Data(format!(
                    "record {i} is {name:?}, expected a {expect_prefix}* record"
                ))
            })?;
            match base {
                None => params.push((stripped.to_string(), value)),
                Some(slot) => {
                    let (pname, _) = &params[slot];
                    if stripped != pname {
                        return Err(Error::Data(format!(
                            "moment record {name:?} does not line up with parameter {pname:?}"
                        )));
                    }
                    if expect_prefix == "adam_m." {
                        adam_m.push(value);
                    } else {
                        adam_v.push(value);
                    }
                }
            }
        }

        Ok(Checkpoint {
            cfg,
            iteration: num("iteration", get("iteration")?)?,
            seed: num("seed", get("seed")?)?,
            adam_t: num("adam_t", get("adam_t")?)?,
            actnorm_initialized: match get("actnorm_initialized")?.as_str() {
                "true" => true,
                "false" => false,
                other => {
                    return Err(Error::Data(format!(
                        "manifest value actnorm_initialized={other} is not a boolean"
                    )))
                }
            },
            params,
            adam_m,
            adam_v,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes()?).map_err(Error::Io)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Checkpoint> {
        let bytes = std::fs::read(path).map_err(Error::Io)?;
        Checkpoint::from_bytes(&bytes)
    }
}

fn join_usize(list: &[usize]) -> String {
    list.iter()
        .map(|v| v.to_string())
        .collect::<Vec<_>>()
        .join(",")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_gaussian_mixture, synth_two_mode_points, ImageBatchSource, PointSource};
    use crate::model::PermutationKind;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn single_param_store(values: &[Real]) -> (ParamStore, ParamId) {
        let mut store = ParamStore::new();
        let id = store.register(
            "w",
            Tensor::new(vec![values.len()], values.to_vec()).unwrap(),
        );
        (store, id)
    }

    #[test]
    fn adam_first_step_matches_the_closed_form() {
        let (mut store, id) = single_param_store(&[0.0, 0.0]);
        let mut adam = AdamState::new(&store);
        adam.step(&mut store, &[Tensor::new(vec![2], vec![1.0, 1.0]).unwrap()])
            .unwrap();
        assert_eq!(adam.t(), 1);
        for &th in store.get(id).data() {
            // m_hat = v_hat = 1, so the step is -alpha/(1 + eps).
            assert!((th + 0.001).abs() < 1e-9, "first Adam step gave {th}");
        }
    }

    #[test]
    fn adam_zero_gradient_is_a_no_op_from_rest() {
        let (mut store, id) = single_param_store(&[0.37, -1.25, 8.0]);
        let before = store.get(id).clone();
        let mut adam = AdamState::new(&store);
        adam.step(&mut store, &[Tensor::zeros(&[3])]).unwrap();
        assert_eq!(store.get(id).data(), before.data());
    }

    #[test]
    fn adam_updates_are_deterministic() {
        let g = Tensor::new(vec![2], vec![0.3, -0.9]).unwrap();
        let run = || {
            let (mut store, id) = single_param_store(&[0.1, 0.2]);
            let mut adam = AdamState::new(&store);
            for _ in 0..5 {
                adam.step(&mut store, std::slice::from_ref(&g)).unwrap();
            }
            store.get(id).data().to_vec()
        };
        let (a, b) = (run(), run());
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }

    #[test]
    fn adam_rejects_non_finite_gradients_without_mutating() {
        let (mut store, id) = single_param_store(&[1.0, 2.0]);
        let before = store.get(id).clone();
        let mut adam = AdamState::new(&store);
        let bad = Tensor::new(vec![2], vec![1.0, Real::NAN]).unwrap();
        let err = adam.step(&mut store, &[bad]).unwrap_err().to_string();
        assert!(err.contains("gradient for parameter w"), "got {err}");
        assert_eq!(store.get(id).data(), before.data());
        assert_eq!(adam.t(), 0);
    }

    #[test]
    fn adam_step_reduces_a_quadratic_loss() {
        // loss = 0.5 * |theta|^2, gradient = theta.
        let theta = vec![0.3, -0.2, 1.7];
        let (mut store, id) = single_param_store(&theta);
        let loss =
            |t: &Tensor| -> Real { t.data().iter().map(|v| 0.5 * v * v).sum() };
        let before = loss(store.get(id));
        let mut adam = AdamState::new(&store);
        let grad = store.get(id).clone();
        adam.step(&mut store, &[grad]).unwrap();
        assert!(loss(store.get(id)) < before);
    }

    fn tiny_image_config() -> FlowConfig {
        FlowConfig {
            levels: 1,
            steps: 2,
            coupling_channels: 8,
            permutation: PermutationKind::Woodbury,
            in_shape: (1, 2, 2),
            bits: 8,
            d_c: Some(vec![2]),
            d_s: Some(vec![1]),
            d_h: None,
            d_w: None,
        }
    }

    fn tiny_image_trainer(seed: u64) -> (Trainer, ImageBatchSource) {
        let file = synth_gaussian_mixture(32, (1, 2, 2), 2, 21).unwrap();
        let source = ImageBatchSource::new(&file, 8, seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let model = build_model(tiny_image_config(), &mut rng).unwrap();
        (Trainer::new(model, seed), source)
    }

    fn opts(iterations: u64) -> TrainOptions {
        TrainOptions {
            iterations,
            batch_size: 8,
            ..TrainOptions::default()
        }
    }

    fn assert_bitwise_equal_params(a: &FlowModel, b: &FlowModel) {
        for (id, name, value) in a.store.iter() {
            let other = b.store.get(id);
            for (x, y) in value.data().iter().zip(other.data()) {
                assert_eq!(x.to_bits(), y.to_bits(), "parameter {name} diverged");
            }
        }
    }

    #[test]
    fn zero_iterations_initializes_actnorms_and_checkpoints() {
        let (mut tr, source) = tiny_image_trainer(3);
        assert!(!tr.model.actnorms_initialized());
        let dir = tempfile::tempdir().unwrap();
        let o = TrainOptions {
            out_dir: Some(dir.path().to_path_buf()),
            ..opts(0)
        };
        let rows = tr.run(&source, &o, &mut |_| {}).unwrap();
        assert!(rows.is_empty());
        assert!(tr.model.actnorms_initialized());

        let ck = Checkpoint::load(dir.path().join("ckpt_final.wfc")).unwrap();
        assert_eq!(ck.iteration, 0);
        assert!(ck.actnorm_initialized);
        let restored = ck.restore().unwrap();
        assert!(restored.model.actnorms_initialized());
        assert_bitwise_equal_params(&tr.model, &restored.model);
    }

    #[test]
    fn checkpoint_bytes_round_trip_bitwise() {
        let (mut tr, source) = tiny_image_trainer(4);
        tr.run(&source, &opts(3), &mut |_| {}).unwrap();
        let ck = tr.checkpoint();
        let bytes = ck.to_bytes().unwrap();
        assert_eq!(&bytes[..4], b"WFC1");

        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back.iteration, 3);
        assert_eq!(back.seed, 4);
        assert_eq!(back.adam_t, 3);
        assert_eq!(back.cfg, tr.model.cfg);
        let restored = back.restore().unwrap();
        assert_bitwise_equal_params(&tr.model, &restored.model);
        for (m, m2) in tr.adam.m.iter().zip(&restored.adam.m) {
            for (x, y) in m.data().iter().zip(m2.data()) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }

        // A truncated or corrupted container is rejected with an offset.
        let err = Checkpoint::from_bytes(&bytes[..7]).unwrap_err().to_string();
        assert!(err.contains("truncated"), "got {err}");
        let mut bad = bytes.clone();
        bad[0] = b'X';
        let err = Checkpoint::from_bytes(&bad).unwrap_err().to_string();
        assert!(err.contains("magic") && err.contains("byte 0"), "got {err}");
    }

    #[test]
    fn resume_matches_the_uninterrupted_run_bitwise() {
        let (mut straight, source) = tiny_image_trainer(5);
        let all = straight.run(&source, &opts(7), &mut |_| {}).unwrap();

        let (mut half, source2) = tiny_image_trainer(5);
        half.run(&source2, &opts(4), &mut |_| {}).unwrap();
        let bytes = half.checkpoint().to_bytes().unwrap();
        let mut resumed = Checkpoint::from_bytes(&bytes).unwrap().restore().unwrap();
        assert_eq!(resumed.iteration(), 4);
        let tail = resumed.run(&source2, &opts(3), &mut |_| {}).unwrap();

        assert_bitwise_equal_params(&straight.model, &resumed.model);
        for (a, b) in all[4..].iter().zip(&tail) {
            assert_eq!(a.iter, b.iter);
            assert_eq!(a.nll_nats.to_bits(), b.nll_nats.to_bits());
            assert_eq!(a.grad_norm.to_bits(), b.grad_norm.to_bits());
        }
    }

    #[test]
    fn failing_step_aborts_with_a_last_good_checkpoint() {
        let (mut tr, source) = tiny_image_trainer(6);
        let dir = tempfile::tempdir().unwrap();
        let o = TrainOptions {
            out_dir: Some(dir.path().to_path_buf()),
            ..opts(2)
        };
        tr.run(&source, &o, &mut |_| {}).unwrap();

        // Poison an actnorm scale: log|s| = -inf makes the forward pass
        // non-finite at that layer.
        let scale_id = tr
            .model
            .store
            .ids()
            .find(|&id| tr.model.store.name(id).ends_with("actnorm.scale"))
            .unwrap();
        let zeros = Tensor::zeros(tr.model.store.get(scale_id).shape());
        tr.model.store.set(scale_id, zeros).unwrap();

        let err = tr.run(&source, &o, &mut |_| {}).unwrap_err();
        assert!(matches!(err, Error::NonFinite(_)), "got {err}");
        let ck = Checkpoint::load(dir.path().join("ckpt_last_good.wfc")).unwrap();
        assert_eq!(ck.iteration, 2);
    }

    #[test]
    fn metrics_rows_print_as_four_columns() {
        let row = MetricsRow {
            iter: 12,
            nll_nats: 2.5,
            bpd: 1.25,
            grad_norm: 0.75,
        };
        assert_eq!(row.to_string(), "12 2.500000 1.250000 0.750000");
    }

    #[test]
    fn threaded_gradients_agree_with_serial() {
        let (mut tr, source) = tiny_image_trainer(8);
        tr.run(&source, &opts(0), &mut |_| {}).unwrap(); // actnorm init only
        let batch = source.batch(0, 8).unwrap();
        let ids: Vec<ParamId> = tr.model.store.ids().collect();

        let (nll_a, grads_a) = grad_pass(&tr.model, &batch, &ids).unwrap();
        // 8 rows over 3 workers -> uneven shards of 3, 3, 2.
        let (nll_b, grads_b) = sharded_grad_pass(&tr.model, &batch, &ids, 3).unwrap();

        assert!((nll_a - nll_b).abs() < 1e-12, "{nll_a} vs {nll_b}");
        for (&id, (a, b)) in ids.iter().zip(grads_a.iter().zip(&grads_b)) {
            for (x, y) in a.data().iter().zip(b.data()) {
                assert!(
                    (x - y).abs() <= 1e-12 * x.abs().max(1.0),
                    "gradient for {} differs across shard counts: {x} vs {y}",
                    tr.model.store.name(id)
                );
            }
        }
    }

    #[test]
    fn loss_trend_on_two_mode_points_is_non_increasing() {
        // Full-batch training: the loss path is deterministic, so the trend
        // check measures optimization, not minibatch sampling noise.
        let points = synth_two_mode_points(2048, 7).unwrap();
        let source = PointSource::new(points, 7).unwrap();
        let cfg = FlowConfig {
            levels: 1,
            steps: 6,
            coupling_channels: 24,
            permutation: PermutationKind::Woodbury,
            in_shape: (2, 1, 1),
            bits: 8,
            d_c: Some(vec![2]),
            d_s: Some(vec![1]),
            d_h: None,
            d_w: None,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut tr = Trainer::new(build_model(cfg, &mut rng).unwrap(), 7);
        let rows = tr
            .run(
                &source,
                &TrainOptions {
                    iterations: 500,
                    batch_size: 2048,
                    ..TrainOptions::default()
                },
                &mut |_| {},
            )
            .unwrap();
        assert_eq!(rows.len(), 500);

        let bpd: Vec<Real> = rows.iter().map(|r| r.bpd).collect();
        let window = 50;
        let ma: Vec<Real> = (0..=bpd.len() - window)
            .map(|i| bpd[i..i + window].iter().sum::<Real>() / window as Real)
            .collect();
        let drops = ma
            .windows(2)
            .filter(|pair| pair[1] <= pair[0])
            .count();
        let frac = drops as Real / (ma.len() - 1) as Real;
        assert!(
            frac >= 0.9,
            "moving-average bpd decreased in only {:.1}% of windows",
            100.0 * frac
        );
    }
}
