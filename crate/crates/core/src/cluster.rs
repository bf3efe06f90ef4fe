//! Simulated multi-device cluster.
//!
//! Devices run in bulk-synchronous rounds, one per layer: every device
//! quantizes its local tokens, the index payloads are all-gathered, and each
//! device then runs the block on its own rows using dequantized embeddings
//! for everything it does not hold. All traffic is recorded in a
//! [`CommsLedger`] at bit-packed sizes.

use std::fmt::Write as _;
use std::ops::Range;

use num_rational::Ratio;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::model::{argmax, Input, KvCache, Model, ModelKind};
use crate::tensor::{self, Tensor};
use crate::vq::{Codebook, QuantizedTokens};

/// Assignment of contiguous token ranges to devices.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ShardPlan {
    total: usize,
    ranges: Vec<Range<usize>>,
    owner: Vec<usize>,
}

/// Contiguous near-even split of `t` tokens over `n` devices. When `t` is not
/// a multiple of `n` the last `t % n` devices hold one extra token.
pub fn partition_tokens(t: usize, n: usize) -> Result<ShardPlan> {
    if n == 0 || t < n {
        return Err(Error::Contract(format!("cannot split {t} tokens over {n} devices")));
    }
    let base = t / n;
    let extra = t % n;
    let mut ranges = Vec::with_capacity(n);
    let mut start = 0;
    for d in 0..n {
        let len = base + usize::from(d >= n - extra);
        ranges.push(start..start + len);
        start += len;
    }
    ShardPlan::from_ranges(t, ranges)
}

impl ShardPlan {
    /// Plan from explicit per-device ranges. Ranges must be non-empty,
    /// disjoint and cover `[0, total)`; they may be listed in any device order.
    pub fn from_ranges(total: usize, ranges: Vec<Range<usize>>) -> Result<Self> {
        if ranges.is_empty() {
            return Err(Error::Plan("no devices".into()));
        }
        let mut owner = vec![usize::MAX; total];
        for (d, r) in ranges.iter().enumerate() {
            if r.is_empty() || r.end > total {
                return Err(Error::Plan(format!("device {d} has range {r:?} in [0, {total})")));
            }
            for t in r.clone() {
                if owner[t] != usize::MAX {
                    return Err(Error::Plan(format!("token {t} assigned twice")));
                }
                owner[t] = d;
            }
        }
        if let Some(t) = owner.iter().position(|&o| o == usize::MAX) {
            return Err(Error::Plan(format!("token {t} unassigned")));
        }
        Ok(ShardPlan { total, ranges, owner })
    }

    pub fn total(&self) -> usize {
        self.total
    }
    pub fn devices(&self) -> usize {
        self.ranges.len()
    }
    pub fn range(&self, device: usize) -> Range<usize> {
        self.ranges[device].clone()
    }
    pub fn ranges(&self) -> &[Range<usize>] {
        &self.ranges
    }
    pub fn owner(&self, token: usize) -> usize {
        self.owner[token]
    }
    /// Device holding the most recent token.
    pub fn last_device(&self) -> usize {
        self.owner[self.total - 1]
    }
}


/// Index payload broadcast by one device for one layer.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IndexMessage {
    pub sender: usize,
    pub layer: usize,
    pub payload: QuantizedTokens,
}

impl IndexMessage {
    pub fn payload_bits(&self) -> u64 {
        self.payload.payload_bits()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LedgerEntry {
    pub layer: usize,
    pub device: usize,
    pub bits_sent: u64,
    pub bits_received: u64,
    pub messages: u64,
}

/// Per-layer, per-device communication record.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct CommsLedger {
    entries: Vec<LedgerEntry>,
}

impl CommsLedger {
    pub fn entries(&self) -> &[LedgerEntry] {
        &self.entries
    }

    pub fn total_sent(&self) -> u64 {
        self.entries.iter().map(|e| e.bits_sent).sum()
    }

    pub fn total_received(&self) -> u64 {
        self.entries.iter().map(|e| e.bits_received).sum()
    }

    pub fn layers(&self) -> usize {
        self.entries.iter().map(|e| e.layer + 1).max().unwrap_or(0)
    }

    /// Bits put on the wire per content token over the whole run.
    pub fn per_token_bits(&self, tokens: usize) -> Ratio<u64> {
        Ratio::new(self.total_sent(), tokens as u64)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("layer,device,bits_sent,bits_received,messages\n");
        for e in &self.entries {
            writeln!(
                s,
                "{},{},{},{},{}",
                e.layer, e.device, e.bits_sent, e.bits_received, e.messages
            )
            .unwrap();
        }
        s
    }
}

/// What a device holds between rounds.
#[derive(Clone, Debug)]
pub struct DeviceState {
    pub id: usize,
    /// Local rows: class replica (if any) then owned tokens.
    pub x: Tensor,
    pub codebooks: Vec<Codebook>,
    pub inbox: Vec<IndexMessage>,
}

/// Deterministically drop one device's payload at one layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Fault {
    pub layer: usize,
    pub sender: usize,
}

/// Delivers every payload to every other device, ordered by sender, and
/// records the traffic. A dropped payload stalls the round: nothing is
/// recorded for the layer and a protocol error is returned.
pub fn allgather_indices(
    devices: &mut [DeviceState],
    outgoing: Vec<IndexMessage>,
    layer: usize,
    ledger: &mut CommsLedger,
    fault: Option<Fault>,
) -> Result<()> {
    let n = devices.len();
    if n == 1 {
        devices[0].inbox.clear();
        ledger.entries.push(LedgerEntry {
            layer,
            device: 0,
            bits_sent: 0,
            bits_received: 0,
            messages: 0,
        });
        return Ok(());
    }
    let mut outgoing: Vec<IndexMessage> = outgoing
        .into_iter()
        .filter(|m| fault != Some(Fault { layer, sender: m.sender }))
        .collect();
    outgoing.sort_by_key(|m| m.sender);
    for d in 0..n {
        if !outgoing.iter().any(|m| m.sender == d && m.layer == layer) {
            return Err(Error::Protocol {
                layer,
                detail: format!("no payload from device {d}; exchange stalled"),
            });
        }
    }
    for dev in devices.iter_mut() {
        dev.inbox = outgoing.iter().filter(|m| m.sender != dev.id).cloned().collect();
        let own = outgoing.iter().find(|m| m.sender == dev.id).unwrap();
        ledger.entries.push(LedgerEntry {
            layer,
            device: dev.id,
            bits_sent: own.payload_bits(),
            bits_received: dev.inbox.iter().map(IndexMessage::payload_bits).sum(),
            messages: dev.inbox.len() as u64,
        });
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Classify,
    Generate { steps: usize },
}

#[derive(Clone, Debug)]
pub struct InferenceOutput {
    /// Class logits, or the next-token logits after prefill.
    pub logits: Tensor,
    /// Generated ids (empty when classifying).
    pub tokens: Vec<usize>,
    pub ledger: CommsLedger,
}

/// A simulated cluster running one model over one shard plan.
pub struct Cluster<'m> {
    model: &'m Model,
    plan: ShardPlan,
    devices: Vec<DeviceState>,
    ledger: CommsLedger,
    pool: rayon::ThreadPool,
    fault: Option<Fault>,
    caches: Option<KvCache>,
}

impl<'m> Cluster<'m> {
    pub fn new(model: &'m Model, plan: ShardPlan, threads: usize) -> Result<Self> {
        if plan.devices() > 1 && !model.has_codebooks() {
            return Err(Error::Lifecycle("codebooks not initialised".into()));
        }
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(threads.max(1))
            .build()
            .map_err(|e| Error::Precondition(format!("thread pool: {e}")))?;
        Ok(Cluster {
            model,
            plan,
            devices: Vec::new(),
            ledger: CommsLedger::default(),
            pool,
            fault: None,
            caches: None,
        })
    }

    pub fn inject_fault(&mut self, fault: Fault) {
        self.fault = Some(fault);
    }

    pub fn ledger(&self) -> &CommsLedger {
        &self.ledger
    }

    pub fn devices(&self) -> &[DeviceState] {
        &self.devices
    }

    /// Lockstep forward of all layers over `input`.
    pub fn prefill(&mut self, input: &Input) -> Result<()> {
        let model = self.model;
        let plan = &self.plan;
        self.ledger = CommsLedger::default();
        self.devices = self.pool.install(|| {
            (0..plan.devices())
                .into_par_iter()
                .map(|d| {
                    Ok(DeviceState {
                        id: d,
                        x: model.device_embed(input, plan, d)?,
                        codebooks: model.codebooks.clone(),
                        inbox: Vec::new(),
                    })
                })
                .collect::<Result<Vec<_>>>()
        })?;
        let last = plan.last_device();
        let mut keys = Vec::with_capacity(model.config.layers);
        let mut values = Vec::with_capacity(model.config.layers);
        for layer in 0..model.config.layers {
            // quantize phase
            let single = plan.devices() == 1;
            let staged: Vec<(Tensor, Option<IndexMessage>)> = self.pool.install(|| {
                self.devices
                    .par_iter()
                    .map(|dev| {
                        let h = model.device_ln1(layer, &dev.x)?;
                        if single {
                            return Ok((h, None));
                        }
                        let content = model.device_content(plan, dev.id, &h)?;
                        let (payload, _) = dev.codebooks[layer].quantize(&content)?;
                        let msg = IndexMessage {
                            sender: dev.id,
                            layer,
                            payload,
                        };
                        Ok((h, Some(msg)))
                    })
                    .collect::<Result<Vec<_>>>()
            })?;
            let (hs, outgoing): (Vec<Tensor>, Vec<Option<IndexMessage>>) = staged.into_iter().unzip();
            let outgoing: Vec<IndexMessage> = outgoing.into_iter().flatten().collect();

            allgather_indices(&mut self.devices, outgoing, layer, &mut self.ledger, self.fault)?;

            // compute phase
            let outs = self.pool.install(|| {
                self.devices
                    .par_iter()
                    .zip(hs.par_iter())
                    .map(|(dev, h)| {
                        let remote = assemble_remote(plan, dev, layer)?;
                        model.device_block(layer, plan, dev.id, &dev.x, h, remote.as_ref())
                    })
                    .collect::<Result<Vec<_>>>()
            })?;
            for (dev, out) in self.devices.iter_mut().zip(outs) {
                if dev.id == last {
                    keys.push(out.keys);
                    values.push(out.values);
                }
                dev.x = out.x;
            }
            self.check_codebooks(layer)?;
        }
        if matches!(model.config.kind, ModelKind::Decoder { .. }) {
            self.caches = Some(KvCache {
                keys,
                values,
                next_position: plan.total(),
            });
        }
        Ok(())
    }

    fn check_codebooks(&self, layer: usize) -> Result<()> {
        if self.devices[0].codebooks.len() <= layer {
            return Ok(());
        }
        let first = &self.devices[0].codebooks[layer];
        if self.devices.iter().any(|d| d.codebooks[layer] != *first) {
            return Err(Error::Protocol {
                layer,
                detail: "device codebook copies diverged".into(),
            });
        }
        Ok(())
    }

    pub fn class_logits(&self) -> Result<Tensor> {
        let reps: Vec<Tensor> = self
            .model
            .replica_devices(self.plan.devices())
            .iter()
            .map(|&d| tensor::gather_rows(&self.devices[d].x, &[0]))
            .collect::<Result<_>>()?;
        self.model.classify_head(&reps)
    }

    /// Next-token logits for the last prompt token.
    pub fn prefill_logits(&self) -> Result<Tensor> {
        let x = &self.devices[self.plan.last_device()].x;
        let last = tensor::gather_rows(x, &[x.rows() - 1])?;
        self.model.decoder_head(&last)
    }

    /// Greedy decoding on the last device.
    pub fn decode(&mut self, steps: usize) -> Result<Vec<usize>> {
        if steps == 0 {
            return Ok(Vec::new());
        }
        let first = argmax(self.prefill_logits()?.row(0));
        let cache = self
            .caches
            .as_mut()
            .ok_or_else(|| Error::Lifecycle("decode before prefill".into()))?;
        let mut out = vec![first];
        while out.len() < steps {
            let logits = self.model.decode_step(cache, *out.last().unwrap())?;
            out.push(argmax(logits.row(0)));
        }
        Ok(out)
    }
}

/// Dequantized embeddings of every token `dev` does not own, in token order.
fn assemble_remote(plan: &ShardPlan, dev: &DeviceState, layer: usize) -> Result<Option<Tensor>> {
    if plan.devices() == 1 {
        return Ok(None);
    }
    let mut by_token: Vec<Option<Vec<f64>>> = vec![None; plan.total()];
    for msg in &dev.inbox {
        if msg.layer != layer {
            return Err(Error::Protocol {
                layer,
                detail: format!("stale payload from layer {}", msg.layer),
            });
        }
        let range = plan.range(msg.sender);
        if msg.payload.tokens != range.len() {
            return Err(Error::Protocol {
                layer,
                detail: format!("device {} sent {} tokens for a shard of {}", msg.sender, msg.payload.tokens, range.len()),
            });
        }
        let x_hat = dev.codebooks[layer].dequantize(&msg.payload)?;
        for (k, t) in range.enumerate() {
            by_token[t] = Some(x_hat.row(k).to_vec());
        }
    }
    let mut rows = Vec::new();
    for (t, row) in by_token.into_iter().enumerate() {
        if plan.owner(t) == dev.id {
            continue;
        }
        match row {
            Some(r) => rows.push(r),
            None => {
                return Err(Error::Protocol {
                    layer,
                    detail: format!("device {} missing indices for token {t}", dev.id),
                })
            }
        }
    }
    Ok(Some(Tensor::from_rows(&rows, crate::tensor::Precision::F32)?))
}

/// Runs a full distributed inference and returns its output and ledger.
pub fn run_inference(model: &Model, input: &Input, plan: &ShardPlan, mode: Mode, threads: usize) -> Result<InferenceOutput> {
    let mut c = Cluster::new(model, plan.clone(), threads)?;
    c.prefill(input)?;
    let (logits, tokens) = match (mode, model.config.kind) {
        (Mode::Classify, ModelKind::Classifier { .. }) => (c.class_logits()?, Vec::new()),
        (Mode::Generate { steps }, ModelKind::Decoder { .. }) => {
            let logits = c.prefill_logits()?;
            (logits, c.decode(steps)?)
        }
        _ => return Err(Error::Contract("inference mode does not match model kind".into())),
    };
    Ok(InferenceOutput {
        logits,
        tokens,
        ledger: c.ledger,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ClassTokenMode, ModelConfig};
    use crate::tensor::Precision;
    use crate::vq::{ceil_log2, CovarianceMode, KMeansOptions};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn payload(layer: u32, tokens: usize, groups: usize, k: usize) -> QuantizedTokens {
        QuantizedTokens {
            layer,
            tokens,
            groups,
            index_bits: ceil_log2(k),
            indices: vec![0; tokens * groups],
        }
    }

    fn blank_devices(n: usize) -> Vec<DeviceState> {
        (0..n)
            .map(|id| DeviceState {
                id,
                x: Tensor::zeros(&[1, 1], Precision::F64),
                codebooks: Vec::new(),
                inbox: Vec::new(),
            })
            .collect()
    }

    #[test]
    fn allgather_accounting() {
        let plan = partition_tokens(1024, 4).unwrap();
        let mut devs = blank_devices(4);
        let msgs = (0..4)
            .rev()
            .map(|d| IndexMessage {
                sender: d,
                layer: 0,
                payload: payload(0, plan.range(d).len(), 1, 1024),
            })
            .collect();
        let mut ledger = CommsLedger::default();
        allgather_indices(&mut devs, msgs, 0, &mut ledger, None).unwrap();
        for e in ledger.entries() {
            assert_eq!(e.bits_sent, 2560);
            assert_eq!(e.bits_received, 7680);
            assert_eq!(e.messages, 3);
        }
        assert_eq!(ledger.total_sent(), ledger.total_received() / 3);
        for d in &devs {
            let senders: Vec<usize> = d.inbox.iter().map(|m| m.sender).collect();
            let mut sorted = senders.clone();
            sorted.sort();
            assert_eq!(senders, sorted);
            assert!(!senders.contains(&d.id));
        }

        let mut one = blank_devices(1);
        let mut ledger = CommsLedger::default();
        allgather_indices(&mut one, Vec::new(), 0, &mut ledger, None).unwrap();
        assert_eq!(ledger.total_sent() + ledger.total_received(), 0);
        assert_eq!(ledger.to_csv(), "layer,device,bits_sent,bits_received,messages\n0,0,0,0,0\n");
    }

    #[test]
    fn missing_payload_stalls() {
        let mut devs = blank_devices(3);
        let msgs = vec![
            IndexMessage { sender: 0, layer: 2, payload: payload(2, 2, 1, 4) },
            IndexMessage { sender: 2, layer: 2, payload: payload(2, 2, 1, 4) },
        ];
        let mut ledger = CommsLedger::default();
        assert!(matches!(
            allgather_indices(&mut devs, msgs, 2, &mut ledger, None),
            Err(Error::Protocol { layer: 2, .. })
        ));
        assert!(ledger.entries().is_empty());
    }

    fn small_classifier(seed: u64, t: usize) -> (Model, Input) {
        let cfg = ModelConfig {
            layers: 3,
            hidden: 8,
            heads: 2,
            mlp_ratio: 2,
            kind: ModelKind::Classifier { input_dim: 3, classes: 3 },
            max_tokens: t,
            codebook_size: 5,
            groups: 2,
            cls_mode: ClassTokenMode::Distributed,
            precision: Precision::F32,
        };
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let x = Tensor::matrix(t, 3, (0..3 * t).map(|_| r.random_range(-1.0..1.0)).collect(), Precision::F32).unwrap();
        let input = Input::Embeddings(x);
        let mut m = Model::new(cfg, seed).unwrap();
        m.init_codebooks(&[input.clone()], seed, KMeansOptions::default(), CovarianceMode::Isotropic)
            .unwrap();
        (m, input)
    }

    #[test]
    fn outputs_independent_of_thread_count() {
        let (m, input) = small_classifier(3, 13);
        let plan = partition_tokens(13, 4).unwrap();
        let a = run_inference(&m, &input, &plan, Mode::Classify, 1).unwrap();
        let b = run_inference(&m, &input, &plan, Mode::Classify, 4).unwrap();
        assert_eq!(a.logits, b.logits);
        assert_eq!(a.ledger, b.ledger);
        // 3 layers x 2 groups x 3 bits per token
        assert_eq!(a.ledger.per_token_bits(13), Ratio::from_integer(18));
        assert_eq!(a.ledger.layers(), 3);
    }

    #[test]
    fn fault_leaves_ledger_up_to_failing_layer() {
        let (m, input) = small_classifier(4, 8);
        let mut c = Cluster::new(&m, partition_tokens(8, 2).unwrap(), 2).unwrap();
        c.inject_fault(Fault { layer: 2, sender: 1 });
        let err = c.prefill(&input).unwrap_err();
        assert!(matches!(err, Error::Protocol { layer: 2, .. }));
        assert_eq!(c.ledger().layers(), 2);
        assert_eq!(c.ledger().entries().len(), 4);
    }

    #[test]
    fn mode_must_match_model() {
        let (m, input) = small_classifier(5, 6);
        let plan = partition_tokens(6, 2).unwrap();
        assert!(matches!(
            run_inference(&m, &input, &plan, Mode::Generate { steps: 2 }, 1),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn partition_examples() {
        let p = partition_tokens(1024, 4).unwrap();
        assert!(p.ranges().iter().all(|r| r.len() == 256));
        let p = partition_tokens(5, 2).unwrap();
        assert_eq!(p.ranges(), &[0..2, 2..5]);
        assert_eq!(partition_tokens(7, 1).unwrap().ranges(), &[0..7]);
        assert!(matches!(partition_tokens(3, 4), Err(Error::Contract(_))));
        assert!(partition_tokens(3, 0).is_err());
    }

    #[test]
    fn explicit_plans_are_validated() {
        assert!(ShardPlan::from_ranges(4, vec![0..2, 1..4]).is_err());
        assert!(ShardPlan::from_ranges(4, vec![0..2, 3..4]).is_err());
        assert!(ShardPlan::from_ranges(4, vec![0..2, 2..2, 2..4]).is_err());
        let p = ShardPlan::from_ranges(4, vec![2..4, 0..2]).unwrap();
        assert_eq!(p.owner(0), 1);
        assert_eq!(p.last_device(), 0);
    }

    proptest! {
        #[test]
        fn partition_invariants(n in 1usize..17, extra in 0usize..200) {
            let t = n + extra;
            let p = partition_tokens(t, n).unwrap();
            prop_assert_eq!(p.devices(), n);
            let mut next = 0;
            for r in p.ranges() {
                prop_assert_eq!(r.start, next);
                next = r.end;
            }
            prop_assert_eq!(next, t);
            let sizes: Vec<usize> = p.ranges().iter().map(|r| r.len()).collect();
            let (lo, hi) = (*sizes.iter().min().unwrap(), *sizes.iter().max().unwrap());
            prop_assert!(hi - lo <= 1);
            prop_assert_eq!(p, partition_tokens(t, n).unwrap());
        }
    }
}
