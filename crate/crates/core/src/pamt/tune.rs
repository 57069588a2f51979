//! Access collection and value-only ranking updates.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{sample_negatives, SelectionConfig, UpdatePlan};
use crate::backbone::{GenIRModel, Token};
use crate::error::{contract, Result};
use crate::numerics::{
    Graph, Optimizer, OptimizerConfig, OptimizerKind, RowGradientMask, Schedule, Tensor,
};
use crate::pmh::{record_access, AccessRecord, MemoryBias, MemoryHead, VALUES};
use crate::trie::{constrained_beam_search, DecoderModel, PrefixTrie};

/// Current-session queries with their gold docid sequences. The harness
/// builds this from one slice's training queries only.
#[derive(Clone, Debug, Default)]
pub struct TuningData {
    session: usize,
    items: Vec<(u32, Vec<Token>, Vec<Token>)>,
}

impl TuningData {
    pub fn new(session: usize) -> Self {
        Self {
            session,
            items: Vec::new(),
        }
    }

    pub fn push(&mut self, query_id: u32, query: Vec<Token>, gold: Vec<Token>) {
        self.items.push((query_id, query, gold));
    }

    pub fn session(&self) -> usize {
        self.session
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn items(&self) -> &[(u32, Vec<Token>, Vec<Token>)] {
        &self.items
    }
}

/// Decode every query with the memory bias active and record the rows read
/// along the decoded identifier. With `beam > 1` the record is the union over
/// all scored hypotheses.
pub fn collect_session_accesses(
    model: &GenIRModel,
    head: &MemoryHead,
    trie: &PrefixTrie,
    queries: &[(u32, Vec<Token>)],
    beam: usize,
    max_len: usize,
) -> Result<Vec<AccessRecord>> {
    let mut out = Vec::with_capacity(queries.len());
    for (id, q) in queries {
        let mut hook = MemoryBias::new(head, model.embedding());
        let ranked = constrained_beam_search(model, q, trie, beam, Some(&mut hook), max_len)?;
        let steps = if beam == 1 {
            ranked
                .first()
                .map(|r| hook.steps_for(&r.tokens))
                .unwrap_or_default()
        } else {
            hook.all_steps()
        };
        out.push(record_access(*id, steps));
    }
    Ok(out)
}

/// One teacher-forced decoding step with frozen-backbone quantities.
#[derive(Clone, Debug)]
pub struct TuningStep {
    pub valid: Vec<Token>,
    pub gold: Token,
    /// Unbiased logits of `valid`.
    pub base_logits: Vec<f64>,
    /// Rows read by all heads and their softmax weights.
    pub rows: Vec<usize>,
    pub weights: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct Stage2Example {
    pub query_id: u32,
    /// Steps with at least one possible negative.
    pub steps: Vec<TuningStep>,
}

/// Run the frozen backbone and addressing once per query under teacher
/// forcing. Steps whose valid set is only the gold token are dropped since
/// they carry no ranking signal.
pub fn prepare_examples(
    model: &GenIRModel,
    head: &MemoryHead,
    trie: &PrefixTrie,
    data: &TuningData,
) -> Result<Vec<Stage2Example>> {
    let mut out = Vec::with_capacity(data.len());
    for (id, query, gold) in data.items() {
        if !trie.contains(gold) {
            return Err(contract(format!("gold docid of query {id} is not in the trie")));
        }
        let ctx = model.prepare(query)?;
        let prefixes: Vec<Vec<Token>> = (0..gold.len()).map(|k| gold[..k].to_vec()).collect();
        let hidden = DecoderModel::hidden(model, &ctx, &prefixes)?;
        let mut steps = Vec::new();
        for (k, h) in hidden.iter().enumerate() {
            let valid = trie.valid_next(&gold[..k]);
            if valid.len() < 2 {
                continue;
            }
            let sel = head.address(h)?;
            let mut rows = Vec::new();
            let mut weights = Vec::new();
            for s in &sel {
                rows.extend_from_slice(&s.rows);
                weights.extend(s.weights());
            }
            steps.push(TuningStep {
                base_logits: model.token_logits(h, Some(&valid)),
                valid,
                gold: gold[k],
                rows,
                weights,
            });
        }
        out.push(Stage2Example {
            query_id: *id,
            steps,
        });
    }
    Ok(out)
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Stage2Report {
    /// Mean per-query hinge loss in each epoch.
    pub epoch_loss: Vec<f64>,
    pub trainable_scalars: usize,
    pub updated_rows: usize,
}

/// Hinge-ranking loss of a batch as a graph scalar (sum over queries).
/// Returns `None` when the batch has no (gold, negative) pair.
fn batch_loss(
    g: &mut Graph,
    head: &MemoryHead,
    embedding: &Tensor,
    batch: &[&Stage2Example],
    margin: f64,
    negatives: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Option<crate::numerics::Var>> {
    let d = embedding.cols();
    let width = batch
        .iter()
        .flat_map(|e| e.steps.iter().map(|s| s.rows.len()))
        .max()
        .unwrap_or(0);
    let mut weights = Vec::new();
    let mut idx = Vec::new();
    let mut pair_step = Vec::new();
    let mut diffs = Vec::new();
    let mut offsets = Vec::new();
    let mut step_no = 0;
    for ex in batch {
        for s in &ex.steps {
            if s.rows.len() != width {
                return Err(contract("inconsistent memory selection width"));
            }
            weights.extend_from_slice(&s.weights);
            idx.extend_from_slice(&s.rows);
            let gold_pos = s
                .valid
                .iter()
                .position(|&t| t == s.gold)
                .expect("gold is valid");
            for neg in sample_negatives(&s.valid, s.gold, negatives, rng)? {
                let neg_pos = s.valid.binary_search(&neg).expect("negative is valid");
                pair_step.push(step_no);
                offsets.push(margin - s.base_logits[gold_pos] + s.base_logits[neg_pos]);
                let eg = embedding.row(s.gold as usize);
                let en = embedding.row(neg as usize);
                diffs.extend(en.iter().zip(eg).map(|(n, y)| n - y));
            }
            step_no += 1;
        }
    }
    if pair_step.is_empty() {
        return Ok(None);
    }
    let values = g.param(head.params(), VALUES)?;
    let alpha = g.constant(Tensor::matrix(step_no, width, weights)?);
    let bias = g.embedding_bag(alpha, values, &idx)?;
    let per_pair = g.embedding(bias, &pair_step)?;
    let diff = g.constant(Tensor::matrix(pair_step.len(), d, diffs)?);
    let prod = g.mul(per_pair, diff)?;
    let ones = g.constant(Tensor::new(vec![d, 1], vec![1.0; d])?);
    let shift = g.matmul(prod, ones)?;
    let off = g.constant(Tensor::matrix(pair_step.len(), 1, offsets)?);
    let pre = g.add(shift, off)?;
    let hinge = g.relu(pre)?;
    Ok(Some(g.sum(hinge)?))
}

/// Update only the value rows in `plan.update` with SGD on the hinge
/// ranking loss. Everything else in `head` stays bit-identical.
pub fn stage2_train(
    head: &mut MemoryHead,
    embedding: &Tensor,
    examples: &[Stage2Example],
    plan: &UpdatePlan,
    config: &SelectionConfig,
    seed: u64,
) -> Result<Stage2Report> {
    config.validate()?;
    let d = head.config().hidden;
    let mut report = Stage2Report {
        trainable_scalars: plan.update.len() * d,
        updated_rows: plan.update.len(),
        ..Default::default()
    };
    if plan.update.is_empty() || examples.is_empty() {
        return Ok(report);
    }
    if let Some(&p) = plan.update.intersection(&plan.protected).next() {
        return Err(contract(format!("row {p} is both protected and selected")));
    }

    let addressing_before = head.addressing_digest();
    let values_before = head.values().clone();
    let frozen_before: Vec<(String, bool)> = head
        .params()
        .iter()
        .map(|(n, p)| (n.to_string(), p.is_frozen()))
        .collect();
    head.params_mut().freeze_all();
    head.params_mut().set_frozen(VALUES, false)?;

    let batches = examples.len().div_ceil(config.batch_size);
    let mut opt = Optimizer::new(OptimizerConfig {
        kind: OptimizerKind::Sgd,
        lr: config.lr,
        schedule: Schedule::LinearWarmupDecay {
            total_steps: batches * config.epochs,
            warmup_frac: config.warmup_frac,
        },
        clip_norm: None,
    });
    let mask = [RowGradientMask::new(VALUES, plan.update.iter().copied())];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..examples.len()).collect();
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<&Stage2Example> = chunk.iter().map(|&i| &examples[i]).collect();
            let mut g = Graph::new();
            let Some(loss) = batch_loss(
                &mut g,
                head,
                embedding,
                &batch,
                config.margin,
                config.negatives,
                &mut rng,
            )?
            else {
                continue;
            };
            total += g.value(loss).item();
            let mean = g.scale(loss, 1.0 / batch.len() as f64)?;
            let grads = g.backward(mean)?;
            drop(g);
            head.params_mut().load_grads(&grads)?;
            opt.masked_step(head.params_mut(), &mask)?;
        }
        let mean = total / examples.len() as f64;
        log::debug!("memory tuning epoch {epoch}: mean hinge loss {mean:.6}");
        report.epoch_loss.push(mean);
    }

    for (name, frozen) in frozen_before {
        head.params_mut().set_frozen(&name, frozen)?;
    }
    if head.addressing_digest() != addressing_before {
        return Err(contract("addressing parameters changed during memory tuning"));
    }
    let after = head.values();
    for r in 0..after.rows() {
        if !plan.update.contains(&r) && after.row(r) != values_before.row(r) {
            return Err(contract(format!("value row {r} outside the update set changed")));
        }
    }
    Ok(report)
}

/// Mean per-query hinge loss with all negatives (no sampling), for monitoring.
pub fn full_hinge_loss(head: &MemoryHead, embedding: &Tensor, examples: &[Stage2Example], margin: f64) -> Result<f64> {
    let mut total = 0.0;
    for ex in examples {
        let mut steps = Vec::new();
        for s in &ex.steps {
            let values = head.values();
            let mut b = vec![0.0; values.cols()];
            for (&row, w) in s.rows.iter().zip(&s.weights) {
                for (bc, vc) in b.iter_mut().zip(values.row(row)) {
                    *bc += w * vc;
                }
            }
            let biased = crate::pmh::bias_valid_logits(&s.base_logits, &b, embedding, &s.valid);
            let gold_pos = s.valid.iter().position(|&t| t == s.gold).expect("gold is valid");
            steps.push(super::RankStep {
                gold: biased[gold_pos],
                negatives: biased
                    .iter()
                    .enumerate()
                    .filter(|(i, _)| *i != gold_pos)
                    .map(|(_, v)| *v)
                    .collect(),
            });
        }
        total += super::hinge_rank_loss(&steps, margin);
    }
    Ok(total / examples.len().max(1) as f64)
}
