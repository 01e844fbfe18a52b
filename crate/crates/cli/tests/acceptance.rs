//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line each and
//! exits nonzero if any fails. Set `ACCEPTANCE_ONLY=1,5` to run a subset.

use std::collections::{BTreeMap, BTreeSet};
use std::panic::{self, AssertUnwindSafe};
use std::process::{Command, ExitCode};
use std::time::{Duration, Instant};

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tod_core::classifier::{
    bce_loss, example_loss_grad, forward, predict, sigmoid, ClassifierParams, PerHead, TrainExample,
};
use tod_core::corpus::{generate_synthetic, Dialog, SyntheticSpec};
use tod_core::decode::{beam_search, constrained_beam_search, LanguageModel, SearchConfig};
use tod_core::encoder::{batch_loss_grad, contrastive_loss, contrastive_loss_grad, EncoderParams};
use tod_core::eval::{bleu4, intent_prf, MetricsReport};
use tod_core::generator::generate;
use tod_core::lm::{LmConfig, LmExample, LmParams};
use tod_core::params::Tensors;
use tod_core::system::{build_vocab, classification_scores, pretrain_encoder, Evaluation, SystemConfig};
use tod_core::taxonomy::{LabelSpace, LabelVector, OTHER};
use tod_core::text::{corrupt_view, Special, TokenId, Vocab, N_RESERVED};
use tod_core::weak::{
    calibrate_thresholds, fresh_classifier, labeled_examples, run_pipeline, select, train_teacher, Gate, Role,
    ScoredExample, ThresholdPolicy, WeakConfig,
};

type Check = fn() -> Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

// ---------------------------------------------------------------------------
// finite differences

/// Max over parameters of `|a - n| / max(|a|, |n|, floor)`, with `n` the
/// central difference of `loss`.
fn fd_error<P: Tensors + Clone>(params: &P, analytic: &P, h: f64, floor: f64, loss: impl Fn(&P) -> f64) -> f64 {
    let mut probe = params.clone();
    let mut worst: f64 = 0.0;
    let grads: Vec<Vec<f64>> = analytic.tensors().iter().map(|(_, t)| t.iter().copied().collect()).collect();
    for (t, g) in grads.iter().enumerate() {
        for (j, &a) in g.iter().enumerate() {
            let orig = probe.tensors_mut()[t].as_slice_mut().expect("standard layout")[j];
            probe.tensors_mut()[t].as_slice_mut().unwrap()[j] = orig + h;
            let up = loss(&probe);
            probe.tensors_mut()[t].as_slice_mut().unwrap()[j] = orig - h;
            let down = loss(&probe);
            probe.tensors_mut()[t].as_slice_mut().unwrap()[j] = orig;
            let n = (up - down) / (2.0 * h);
            let err = (a - n).abs() / a.abs().max(n.abs()).max(floor);
            worst = if err.is_nan() { f64::INFINITY } else { worst.max(err) };
        }
    }
    worst
}

fn zeroed<P: Tensors + Clone>(p: &P) -> P {
    let mut g = p.clone();
    for mut t in g.tensors_mut() {
        t.fill(0.0);
    }
    g
}

fn criterion_1() -> Result<String, String> {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1001);

    // contrastive loss: gradient wrt encodings and wrt encoder parameters
    let mut worst_input: f64 = 0.0;
    let mut worst_encoder: f64 = 0.0;
    for _ in 0..20 {
        let n = rng.gen_range(2..=5);
        let d = rng.gen_range(2..=6);
        let tau = rng.gen_range(0.1..1.0);
        let a = Array2::from_shape_fn((n, d), |_| rng.gen_range(-1.0..1.0));
        let b = Array2::from_shape_fn((n, d), |_| rng.gen_range(-1.0..1.0));
        let (_, da, db) = contrastive_loss_grad(&a, &b, tau).map_err(|e| e.to_string())?;
        let h = 1e-6;
        for i in 0..n {
            for j in 0..d {
                for (which, grad) in [(0, &da), (1, &db)] {
                    let (mut xp, mut xm) = (a.clone(), a.clone());
                    let (mut yp, mut ym) = (b.clone(), b.clone());
                    if which == 0 {
                        xp[[i, j]] += h;
                        xm[[i, j]] -= h;
                    } else {
                        yp[[i, j]] += h;
                        ym[[i, j]] -= h;
                    }
                    let num = (contrastive_loss(&xp, &yp, tau).unwrap() - contrastive_loss(&xm, &ym, tau).unwrap()) / (2.0 * h);
                    let err = (num - grad[[i, j]]).abs() / num.abs().max(grad[[i, j]].abs()).max(1e-6);
                    worst_input = worst_input.max(err);
                }
            }
        }

        let vocab = 10;
        let p = EncoderParams::new(vocab, d + 2, 0.3, &mut rng);
        let views: Vec<_> = (0..n)
            .map(|_| {
                let len = rng.gen_range(1..6);
                let u: Vec<TokenId> = (0..len).map(|_| rng.gen_range(3..vocab as TokenId)).collect();
                let ma = p.sample_mask(&mut rng);
                let vb = corrupt_view(&u, 0.3, &mut rng);
                let mb = p.sample_mask(&mut rng);
                (u, ma, vb, mb)
            })
            .collect();
        let (_, analytic) = batch_loss_grad(&p, &views, tau).map_err(|e| e.to_string())?;
        worst_encoder = worst_encoder.max(fd_error(&p, &analytic, 1e-5, 1e-6, |q| batch_loss_grad(q, &views, tau).unwrap().0));
    }

    // joint BCE through heads and encoder, with non-unit class weights
    let space = LabelSpace::default();
    let mut worst_bce: f64 = 0.0;
    for _ in 0..20 {
        let vocab = 12;
        let enc = EncoderParams::new(vocab, rng.gen_range(3..=6), 0.2, &mut rng);
        let mut p = ClassifierParams::new(&space, enc, &mut rng);
        p.class_weights = p.class_weights.map(|w| w.mapv(|_| rng.gen_range(0.2..3.0)));
        let bits = |k: usize, rng: &mut ChaCha8Rng| (0..k).map(|_| rng.gen_bool(0.3)).collect::<Vec<bool>>();
        let ex = TrainExample {
            tokens: (0..rng.gen_range(1..7)).map(|_| rng.gen_range(3..vocab as TokenId)).collect(),
            labels: LabelVector { ui: bits(space.k_ui(), &mut rng), si: bits(space.k_si(), &mut rng), slot: bits(space.k_slot(), &mut rng) },
        };
        let mask = p.encoder.sample_mask(&mut rng);
        let mut analytic = zeroed(&p);
        example_loss_grad(&p, &ex, mask.clone(), 1.0, &mut analytic).map_err(|e| e.to_string())?;
        worst_bce = worst_bce.max(fd_error(&p, &analytic, 1e-5, 1e-6, |q| {
            let mut scratch = zeroed(q);
            example_loss_grad(q, &ex, mask.clone(), 1.0, &mut scratch).unwrap().total
        }));
    }

    // LM cross-entropy; weights enlarged so every path carries signal
    let mut worst_lm: f64 = 0.0;
    for case in 0..20 {
        let vocab = 7;
        let cfg = LmConfig { vocab_size: vocab, width: 8, layers: 1 + case % 2, heads: 2, window: 16 };
        let mut p = LmParams::new(cfg, &mut rng).map_err(|e| e.to_string())?;
        for mut t in p.tensors_mut() {
            t.mapv_inplace(|x| x * 10.0 + rng.gen_range(-0.05..0.05));
        }
        let n = rng.gen_range(2..8);
        let tokens: Vec<TokenId> = (0..n).map(|_| rng.gen_range(0..vocab as TokenId)).collect();
        let mut target: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.6)).collect();
        target[n - 1] = true;
        let ex = LmExample { tokens, target };
        let mut analytic = zeroed(&p);
        p.loss_grad(&ex, 1.0, Some(&mut analytic)).map_err(|e| e.to_string())?;
        worst_lm = worst_lm.max(fd_error(&p, &analytic, 1e-5, 1e-5, |q| q.loss_grad(&ex, 1.0, None).unwrap().0));
    }

    let elapsed = start.elapsed();
    let detail = format!(
        "max rel err: contrastive inputs {worst_input:.1e}, encoder {worst_encoder:.1e}, joint BCE {worst_bce:.1e}, LM {worst_lm:.1e}; 20 instances each; {:.1}s",
        elapsed.as_secs_f64()
    );
    ensure(worst_input < 1e-4 && worst_encoder < 1e-4 && worst_bce < 1e-4, || detail.clone())?;
    ensure(worst_lm < 1e-3, || detail.clone())?;
    ensure(elapsed < Duration::from_secs(30), || detail.clone())?;
    Ok(detail)
}

// ---------------------------------------------------------------------------

fn criterion_2() -> Result<String, String> {
    for n in [1usize, 2, 7, 31, 200] {
        let z = Array1::zeros(n);
        for labels in [Array1::zeros(n), Array1::ones(n)] {
            let got = bce_loss(z.view(), labels.view(), Array1::ones(n).view()).map_err(|e| e.to_string())?;
            let want = n as f64 * std::f64::consts::LN_2;
            ensure((got - want).abs() < 1e-9, || format!("N={n}: {got} vs {want}"))?;
        }
    }
    // (logit, label, weight, value at 40 significant digits, rounded)
    let cases: [(f64, f64, f64, f64); 10] = [
        (-40.0, 0.0, 1.0, 4.2483542552915889863e-18),
        (-40.0, 1.0, 1.0, 40.000000000000000004),
        (-3.5, 1.0, 1.0, 3.5297504182726205652),
        (-0.25, 0.0, 2.5, 1.4398485496971089055),
        (0.7, 1.0, 1.0, 0.40318604888545790793),
        (0.7, 0.0, 0.5, 0.55159302444272893176),
        (5.0, 0.0, 1.0, 5.0067153484891180686),
        (35.0, 1.0, 1.0, 6.3051167601469873979e-16),
        (35.0, 0.0, 1.0, 35.000000000000000631),
        (1e-8, 1.0, 1.0, 0.69314717555994532192),
    ];
    let mut worst: f64 = 0.0;
    for (x, y, w, want) in cases {
        let got = bce_loss(Array1::from(vec![x]).view(), Array1::from(vec![y]).view(), Array1::from(vec![w]).view())
            .map_err(|e| e.to_string())?;
        let err = (got - want).abs();
        worst = worst.max(err);
        ensure(err < 1e-9, || format!("x={x} y={y} w={w}: {got} vs {want}"))?;
    }
    Ok(format!("N*ln2 for N up to 200; 10 single-logit cases, max abs err {worst:.1e}"))
}

// ---------------------------------------------------------------------------

fn criterion_3() -> Result<String, String> {
    let space = LabelSpace::default();
    let mut rng = ChaCha8Rng::seed_from_u64(3003);
    let k = PerHead { ui: space.k_ui(), si: space.k_si(), slot: space.k_slot() };
    let mut kept = (0usize, 0usize);
    for trial in 0..200 {
        let n = rng.gen_range(1..40);
        let scored: Vec<ScoredExample> = (0..n)
            .map(|i| ScoredExample {
                dialog_id: format!("d{}", i / 3),
                turn_index: (i % 3) as u32,
                probs: k.map(|&k| (0..k).map(|_| rng.gen::<f64>()).collect()),
                role: if rng.gen_bool(0.5) { Role::User } else { Role::Service },
            })
            .collect();
        let low = k.map(|&k| (0..k).map(|_| rng.gen_range(0.0..1.0)).collect::<Vec<f64>>());
        let high = PerHead {
            ui: low.ui.iter().map(|&r| rng.gen_range(r..=1.0)).collect(),
            si: low.si.iter().map(|&r| rng.gen_range(r..=1.0)).collect(),
            slot: low.slot.iter().map(|&r| rng.gen_range(r..=1.0)).collect(),
        };
        let (low, high) = (ThresholdPolicy(low), ThresholdPolicy(high));
        for gate in [Gate::Ui, Gate::Si] {
            let loose = select(&scored, &low, gate, &space);
            let strict = select(&scored, &high, gate, &space);
            let loose_map: BTreeMap<(String, u32), &LabelVector> =
                loose.turns.iter().map(|t| ((t.dialog_id.clone(), t.turn_index), &t.labels)).collect();
            for t in &strict.turns {
                let l = loose_map
                    .get(&(t.dialog_id.clone(), t.turn_index))
                    .ok_or_else(|| format!("trial {trial}: {}#{} kept only by the stricter policy", t.dialog_id, t.turn_index))?;
                let sub = |a: &[bool], b: &[bool]| a.iter().zip(b).all(|(x, y)| !x || *y);
                ensure(sub(&t.labels.ui, &l.ui) && sub(&t.labels.si, &l.si) && sub(&t.labels.slot, &l.slot), || {
                    format!("trial {trial}: stricter policy produced a label the looser one lacks")
                })?;
            }
            kept.0 += loose.turns.len();
            kept.1 += strict.turns.len();
        }
    }
    Ok(format!("200 triples x 2 gates, 0 violations ({} loose vs {} strict selections)", kept.0, kept.1))
}

// ---------------------------------------------------------------------------

fn first_turns(dialogs: &[Dialog], budget: usize) -> Vec<Dialog> {
    let mut out = Vec::new();
    let mut n = 0;
    for d in dialogs {
        if n == budget {
            break;
        }
        let mut d = d.clone();
        d.turns.truncate(budget - n);
        n += d.turns.len();
        out.push(d);
    }
    out
}

fn criterion_4() -> Result<String, String> {
    let space = LabelSpace::default();
    let mut spec = SyntheticSpec::new(200, 0, 4004);
    spec.n_dev = 1000;
    spec.n_test = 1000;
    spec.label_noise_rate = 0.05;
    let split = generate_synthetic(&spec).map_err(|e| e.to_string())?;
    let labeled = first_turns(&split.labeled, 500);
    let n_turns: usize = labeled.iter().map(|d| d.turns.len()).sum();
    ensure(n_turns == 500, || format!("only {n_turns} labeled turns"))?;
    let vocab = build_vocab(&split, &space);
    let encoder = pretrain_encoder(&split, &vocab, &SystemConfig::default()).map_err(|e| e.to_string())?;

    let mut checked = 0;
    let mut worst = (1.0f64, String::new());
    let mut vacuous = 0;
    for (role, seed) in [(Role::User, 1), (Role::Service, 2)] {
        let init = fresh_classifier(&space, &encoder, seed);
        let teacher = train_teacher(role, &labeled, &init, &vocab, &space, &WeakConfig::default().teacher).map_err(|e| e.to_string())?;
        let policy = calibrate_thresholds(&teacher, role, &split.dev, &vocab, &space, 0.9).map_err(|e| e.to_string())?;
        let held_out = labeled_examples(&split.test, role, &vocab, &space).map_err(|e| e.to_string())?;
        let probs: Vec<PerHead<Array1<f64>>> = held_out.iter().map(|e| forward(&teacher, &e.tokens).probs).collect();
        type Pick = fn(&PerHead<Array1<f64>>) -> &Array1<f64>;
        type Gold = fn(&LabelVector) -> &Vec<bool>;
        let heads: Vec<(&str, &[String], &[f64], Pick, Gold)> = match role {
            Role::User => vec![
                ("ui", &space.ui_labels, &policy.0.ui, |p| &p.ui, |l| &l.ui),
                ("slot", &[], &policy.0.slot, |p| &p.slot, |l| &l.slot),
            ],
            Role::Service => vec![("si", &space.si_labels, &policy.0.si, |p| &p.si, |l| &l.si)],
        };
        for (head, names, rho, pick, gold) in heads {
            for (c, &r) in rho.iter().enumerate() {
                let positives = held_out.iter().filter(|e| gold(&e.labels)[c]).count();
                if positives < 20 {
                    continue;
                }
                let (mut tp, mut fp) = (0, 0);
                for (e, p) in held_out.iter().zip(&probs) {
                    if pick(p)[c] >= r {
                        if gold(&e.labels)[c] {
                            tp += 1;
                        } else {
                            fp += 1;
                        }
                    }
                }
                checked += 1;
                if tp + fp == 0 {
                    vacuous += 1;
                    continue;
                }
                let precision = tp as f64 / (tp + fp) as f64;
                let name = names.get(c).cloned().unwrap_or_else(|| space.tree.nodes()[c].name.clone());
                if precision < worst.0 {
                    worst = (precision, format!("{head}:{name}"));
                }
                ensure(precision >= 0.85, || format!("{head}:{name} precision {precision:.3} at rho {r} ({tp}/{})", tp + fp))?;
            }
        }
    }
    Ok(format!(
        "{checked} classes with >=20 held-out positives; min precision {:.3} ({}); {vacuous} selected nothing",
        worst.0, worst.1
    ))
}

// ---------------------------------------------------------------------------
// a history-dependent toy LM and an exhaustive search over it

fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Next-token distribution is a pseudo-random function of the whole prefix.
struct HashLm {
    vocab: usize,
    seed: u64,
    spread: f64,
}

#[derive(Clone)]
struct HashState {
    hash: u64,
    log_probs: Vec<f64>,
}

impl HashLm {
    fn state(&self, hash: u64) -> HashState {
        let logits: Vec<f64> = (0..self.vocab)
            .map(|t| (mix(hash ^ mix(t as u64 + 1)) >> 11) as f64 / (1u64 << 53) as f64 * self.spread)
            .collect();
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
        HashState { hash, log_probs: logits.iter().map(|l| l - lse).collect() }
    }
}

impl LanguageModel for HashLm {
    type State = HashState;

    fn start(&self, context: &[TokenId]) -> HashState {
        let h = context.iter().fold(mix(self.seed), |h, &t| mix(h ^ (t as u64 + 0x100)));
        self.state(h)
    }

    fn log_probs<'a>(&'a self, state: &'a HashState) -> &'a [f64] {
        &state.log_probs
    }

    fn advance(&self, state: &HashState, token: TokenId) -> HashState {
        self.state(mix(state.hash ^ (token as u64 + 0x100)))
    }
}

fn contains(hay: &[TokenId], needle: &[TokenId]) -> bool {
    hay.windows(needle.len()).any(|w| w == needle)
}

/// Highest length-normalized score over constraint-satisfying sequences of
/// at most `max_len` tokens followed by `eos`; ties go to the
/// lexicographically smaller sequence.
fn exhaustive(m: &HashLm, ctx: &[TokenId], constraints: &[Vec<TokenId>], max_len: usize, eos: TokenId) -> Option<(Vec<TokenId>, f64)> {
    fn walk(
        m: &HashLm,
        st: &HashState,
        seq: &mut Vec<TokenId>,
        lp: f64,
        constraints: &[Vec<TokenId>],
        max_len: usize,
        eos: TokenId,
        best: &mut Option<(Vec<TokenId>, f64)>,
    ) {
        if constraints.iter().all(|c| contains(seq, c)) {
            let score = (lp + st.log_probs[eos as usize]) / (seq.len() + 1) as f64;
            let better = match best {
                None => true,
                Some((b, s)) => score > *s || (score == *s && seq.as_slice() < b.as_slice()),
            };
            if better {
                *best = Some((seq.clone(), score));
            }
        }
        if seq.len() == max_len {
            return;
        }
        for t in 0..m.vocab as TokenId {
            if t == eos {
                continue;
            }
            seq.push(t);
            let next = m.advance(st, t);
            walk(m, &next, seq, lp + st.log_probs[t as usize], constraints, max_len, eos, best);
            seq.pop();
        }
    }
    let mut best = None;
    walk(m, &m.start(ctx), &mut Vec::new(), 0.0, constraints, max_len, eos, &mut best);
    best
}

fn random_constraints(rng: &mut ChaCha8Rng, vocab: usize, count: usize, max_tok: usize, budget: usize) -> Vec<Vec<TokenId>> {
    let mut out: Vec<Vec<TokenId>> = Vec::new();
    let mut used = 0;
    for _ in 0..count {
        let len = rng.gen_range(1..=max_tok).min(budget - used);
        if len == 0 {
            break;
        }
        used += len;
        out.push((0..len).map(|_| rng.gen_range(1..vocab as TokenId)).collect());
    }
    out
}

fn criterion_5() -> Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(5005);
    let eos = 0;
    let mut forced = 0;
    for case in 0..100 {
        let vocab = rng.gen_range(3..=8);
        let max_len = rng.gen_range(1..=6);
        let m = HashLm { vocab, seed: rng.gen(), spread: rng.gen_range(0.5..6.0) };
        let n_constraints = rng.gen_range(0..=2);
        let constraints = random_constraints(&mut rng, vocab, n_constraints, 2, max_len);
        let ctx: Vec<TokenId> = (0..rng.gen_range(1..4)).map(|_| rng.gen_range(0..vocab as TokenId)).collect();
        let cfg = SearchConfig { beam: 64, max_len, eos };
        let got = constrained_beam_search(&m, &ctx, &constraints, &cfg).map_err(|e| e.to_string())?;
        let (want, score) = exhaustive(&m, &ctx, &constraints, max_len, eos).ok_or("oracle found no sequence")?;
        ensure(got.tokens == want, || {
            format!("case {case}: V={vocab} L={max_len} {constraints:?}: beam {:?} ({}) vs exhaustive {want:?} ({score})", got.tokens, got.score)
        })?;
        ensure((got.score - score).abs() < 1e-9, || format!("case {case}: score {} vs {score}", got.score))?;
    }

    // containment on unrestricted inputs, toy and real models
    let mut total = 0;
    for _ in 0..300 {
        let vocab = rng.gen_range(3..40);
        let max_len = rng.gen_range(1..16);
        let m = HashLm { vocab, seed: rng.gen(), spread: rng.gen_range(0.5..8.0) };
        let count = rng.gen_range(0..=4);
        let constraints = random_constraints(&mut rng, vocab, count, 4.min(max_len), usize::MAX / 2)
            .into_iter()
            .map(|c| c[..c.len().min(max_len)].to_vec())
            .collect::<Vec<_>>();
        let cfg = SearchConfig { beam: rng.gen_range(1..8), max_len, eos };
        let out = constrained_beam_search(&m, &[1], &constraints, &cfg).map_err(|e| e.to_string())?;
        forced += out.forced as usize;
        total += 1;
        for c in &constraints {
            ensure(contains(&out.tokens, c), || format!("{c:?} missing from {:?}", out.tokens))?;
        }
    }
    let words: Vec<String> = (0..30).map(|i| format!("w{i}")).collect();
    let vocab = Vocab::build(words.iter().map(String::as_str));
    for _ in 0..20 {
        let lm = LmParams::new(LmConfig { vocab_size: vocab.len(), width: 16, layers: 1, heads: 2, window: 64 }, &mut rng)
            .map_err(|e| e.to_string())?;
        let pick = |rng: &mut ChaCha8Rng| rng.gen_range(N_RESERVED..vocab.len()) as TokenId;
        let constraints: Vec<Vec<TokenId>> =
            (0..rng.gen_range(1..=3)).map(|_| (0..rng.gen_range(1..=3)).map(|_| pick(&mut rng)).collect()).collect();
        let ctx: Vec<TokenId> = (0..5).map(|_| pick(&mut rng)).collect();
        let cfg = SearchConfig { beam: 3, max_len: 12, eos: Special::Eos.id() };
        let out = generate(&lm, &vocab, &ctx, &constraints, &cfg).map_err(|e| e.to_string())?;
        forced += out.forced as usize;
        total += 1;
        for c in &constraints {
            ensure(contains(&out.tokens, c), || format!("{c:?} missing from generated {:?}", out.tokens))?;
        }
    }
    Ok(format!(
        "100/100 equal the exhaustive argmax (V<=8, max_len<=6, B=64, <=2 constraints of <=2 tokens); {total}/{total} unrestricted outputs contain every constraint ({forced} via fallback)"
    ))
}

// ---------------------------------------------------------------------------

fn criterion_6() -> Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(6006);
    for case in 0..100 {
        let vocab = rng.gen_range(3..30);
        let m = HashLm { vocab, seed: rng.gen(), spread: rng.gen_range(0.5..6.0) };
        let cfg = SearchConfig { beam: rng.gen_range(1..10), max_len: rng.gen_range(1..12), eos: 0 };
        let ctx: Vec<TokenId> = (0..rng.gen_range(1..4)).map(|_| rng.gen_range(0..vocab as TokenId)).collect();
        let a = constrained_beam_search(&m, &ctx, &[], &cfg).map_err(|e| e.to_string())?;
        let b = beam_search(&m, &ctx, &cfg).map_err(|e| e.to_string())?;
        ensure(a.tokens == b.tokens, || format!("case {case}: {:?} vs {:?}", a.tokens, b.tokens))?;
    }
    Ok("100/100 token-identical".into())
}

// ---------------------------------------------------------------------------

fn ngrams(s: &[String], n: usize) -> BTreeMap<&[String], usize> {
    let mut m = BTreeMap::new();
    if s.len() >= n {
        for w in s.windows(n) {
            *m.entry(w).or_insert(0) += 1;
        }
    }
    m
}

/// Corpus BLEU-4, uniform weights, no smoothing.
fn reference_bleu(hyps: &[Vec<String>], refs: &[Vec<String>]) -> f64 {
    let mut log_sum = 0.0;
    for n in 1..=4 {
        let (mut hit, mut total) = (0usize, 0usize);
        for (h, r) in hyps.iter().zip(refs) {
            let rc = ngrams(r, n);
            for (g, c) in ngrams(h, n) {
                hit += c.min(*rc.get(g).unwrap_or(&0));
                total += c;
            }
        }
        if hit == 0 {
            return 0.0;
        }
        log_sum += (hit as f64 / total as f64).ln();
    }
    let c: usize = hyps.iter().map(Vec::len).sum();
    let r: usize = refs.iter().map(Vec::len).sum();
    let bp = if c > r { 1.0 } else { (1.0 - r as f64 / c as f64).exp() };
    100.0 * bp * (log_sum / 4.0).exp()
}

fn criterion_7() -> Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(7007);
    let pool = ["the", "fee", "is", "30", "yuan", "plan", "GB", "your", "bill", "month", ","];
    let sentence = |rng: &mut ChaCha8Rng| -> Vec<String> {
        (0..rng.gen_range(3..14)).map(|_| pool[rng.gen_range(0..pool.len())].to_string()).collect()
    };
    let mut worst: f64 = 0.0;
    let mut nonzero = 0;
    for _ in 0..50 {
        let n = rng.gen_range(1..5);
        let refs: Vec<Vec<String>> = (0..n).map(|_| sentence(&mut rng)).collect();
        // hypotheses: edited copies of the references
        let hyps: Vec<Vec<String>> = refs
            .iter()
            .map(|r| {
                let mut h = r.clone();
                for _ in 0..rng.gen_range(0..3) {
                    let i = rng.gen_range(0..h.len());
                    h[i] = pool[rng.gen_range(0..pool.len())].to_string();
                }
                if rng.gen_bool(0.3) {
                    h.truncate(rng.gen_range(1..=h.len()));
                }
                h
            })
            .collect();
        let got = bleu4(&hyps, &refs).map_err(|e| e.to_string())?;
        let want = reference_bleu(&hyps, &refs);
        nonzero += (want > 0.0) as usize;
        worst = worst.max((got - want).abs());
        ensure((got - want).abs() < 1e-6, || format!("{got} vs {want}"))?;
    }
    let corpus: Vec<Vec<String>> = (0..5).map(|_| sentence(&mut rng)).collect();
    let same = bleu4(&corpus, &corpus).map_err(|e| e.to_string())?;
    ensure(same == 100.0, || format!("identical corpus scored {same}"))?;

    let set = |xs: &[&str]| xs.iter().map(|s| s.to_string()).collect::<BTreeSet<String>>();
    let p = intent_prf(&[set(&["a", "b"])], &[set(&["a", "c"])]).map_err(|e| e.to_string())?;
    ensure((p.precision, p.recall, p.f1) == (0.5, 0.5, 0.5), || format!("{p:?}"))?;
    let p = intent_prf(&[set(&["a"]), set(&[])], &[set(&["a"]), set(&["b"])]).map_err(|e| e.to_string())?;
    ensure((p.precision, p.recall) == (1.0, 0.5) && (p.f1 - 2.0 / 3.0).abs() < 1e-15, || format!("{p:?}"))?;
    let p = intent_prf(&[set(&["a", "b", "c"])], &[set(&["a", "b", "c"])]).map_err(|e| e.to_string())?;
    ensure((p.precision, p.recall, p.f1) == (1.0, 1.0, 1.0), || format!("{p:?}"))?;
    Ok(format!("50 corpora ({nonzero} nonzero) max |diff| {worst:.1e}; identical corpus = 100.0; intent_prf hand cases exact"))
}

// ---------------------------------------------------------------------------

fn tod(args: &[&str]) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_tod")).args(args).output().map_err(|e| e.to_string())?;
    ensure(out.status.success(), || format!("tod {} failed: {}", args.join(" "), String::from_utf8_lossy(&out.stderr)))
}

fn criterion_8() -> Result<String, String> {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let corpus = dir.path().join("corpus.jsonl");
    let cfg = dir.path().join("run.toml");
    // defaults: seed 42, 1000 labeled / 5000 unlabeled dialogs, noise 0.05
    std::fs::write(&cfg, format!("[paths]\ncorpus = '{}'\n", corpus.display())).map_err(|e| e.to_string())?;
    let cfg = cfg.to_str().unwrap();
    tod(&["gen-data", "--config", cfg, "--seed", "42"])?;
    let mut runs = Vec::new();
    for name in ["run1", "run2"] {
        let out = dir.path().join(name);
        let t = Instant::now();
        tod(&["pipeline", "--config", cfg, "--seed", "42", "--out", out.to_str().unwrap()])?;
        let secs = t.elapsed().as_secs_f64();
        let metrics = std::fs::read(out.join("reports/metrics.json")).map_err(|e| e.to_string())?;
        runs.push((secs, metrics));
    }
    let eval: Evaluation = serde_json::from_slice(&runs[0].1).map_err(|e| e.to_string())?;
    let report = |r: &MetricsReport| format!("UI F1 {:.4}, BLEU {:.2}, success {:.4}", r.ui.f1, r.bleu4, r.success_rate);
    let detail = format!(
        "runs {:.0}s / {:.0}s; predicted: {}; oracle: {}",
        runs[0].0,
        runs[1].0,
        report(&eval.predicted),
        report(&eval.oracle)
    );
    ensure(runs[0].1 == runs[1].1, || format!("metrics differ between runs; {detail}"))?;
    ensure(runs.iter().all(|(s, _)| *s < 600.0), || detail.clone())?;
    ensure(eval.predicted.ui.f1 >= 0.90, || detail.clone())?;
    ensure(eval.oracle.success_rate >= 0.95, || detail.clone())?;
    Ok(format!("byte-identical metrics; {detail}"))
}

// ---------------------------------------------------------------------------

fn criterion_9() -> Result<String, String> {
    let space = LabelSpace::default();
    let base = SystemConfig::default();
    let mut rows = Vec::new();
    let mut wins = 0;
    for seed in [1u64, 2, 3] {
        let mut spec = SyntheticSpec::new(100, 5000, seed);
        spec.label_noise_rate = 0.05;
        let split = generate_synthetic(&spec).map_err(|e| e.to_string())?;
        let vocab = build_vocab(&split, &space);
        let cfg = SystemConfig { seed, ..base.clone() };
        let encoder = pretrain_encoder(&split, &vocab, &cfg).map_err(|e| e.to_string())?;
        let weak = WeakConfig { seed, ..cfg.weak.clone() };
        let out = run_pipeline(&split.labeled, &split.unlabeled, &split.dev, &encoder, &vocab, &space, &weak)
            .map_err(|e| e.to_string())?;
        let thr = cfg.decode.other_threshold;
        let (student, _, _) = classification_scores(&out.student, &vocab, &space, &split.test, thr).map_err(|e| e.to_string())?;
        let (teacher, _, _) = classification_scores(&out.ui_teacher, &vocab, &space, &split.test, thr).map_err(|e| e.to_string())?;
        wins += (student.f1 >= teacher.f1) as usize;
        rows.push(format!("seed {seed}: student {:.4} vs teacher {:.4}", student.f1, teacher.f1));
    }
    let detail = format!("{}; {wins}/3 seeds student >= teacher", rows.join(", "));
    ensure(wins >= 2, || detail.clone())?;
    Ok(detail)
}

// ---------------------------------------------------------------------------

fn criterion_10() -> Result<String, String> {
    let space = LabelSpace::default();
    let mut rng = ChaCha8Rng::seed_from_u64(1010);
    let logit = |p: f64| (p / (1.0 - p)).ln();
    let k = PerHead { ui: space.k_ui(), si: space.k_si(), slot: space.k_slot() };
    let other: BTreeSet<String> = [OTHER.to_string()].into();
    let mut below = 0;
    for trial in 0..2000 {
        // a third of the trials push every head below the threshold, some right at its edge
        let all_low = trial % 3 == 0;
        let probs = k.map(|&k| {
            Array1::from_shape_fn(k, |_| {
                let x = if all_low {
                    if rng.gen_bool(0.1) { logit(0.0999999) } else { logit(rng.gen_range(1e-9..0.0999)) }
                } else {
                    rng.gen_range(-8.0..4.0)
                };
                sigmoid(x)
            })
        });
        let pred = predict(&probs, 0.1, &space);
        for (head, p, labels) in [("ui", &probs.ui, &pred.ui), ("si", &probs.si, &pred.si)] {
            let max = p.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            if max < 0.1 {
                below += 1;
                ensure(*labels == other, || format!("trial {trial}: {head} max {max} decoded to {labels:?}"))?;
            } else {
                ensure(!labels.contains(OTHER), || format!("trial {trial}: {head} max {max} decoded to {labels:?}"))?;
            }
        }
    }
    Ok(format!("2000 crafted logit sets, {below} all-below heads, 0 violations"))
}

fn main() -> ExitCode {
    let criteria: [(u32, &str, Check); 10] = [
        (1, "gradient oracles", criterion_1),
        (2, "BCE exactness", criterion_2),
        (3, "threshold-selection monotonicity", criterion_3),
        (4, "calibration guarantee", criterion_4),
        (5, "constrained decoding oracle", criterion_5),
        (6, "beam reduction", criterion_6),
        (7, "metric oracles", criterion_7),
        (8, "end-to-end synthetic pipeline", criterion_8),
        (9, "weak-supervision benefit", criterion_9),
        (10, "Other fallback", criterion_10),
    ];
    let only: Option<BTreeSet<u32>> =
        std::env::var("ACCEPTANCE_ONLY").ok().map(|s| s.split(',').filter_map(|x| x.trim().parse().ok()).collect());
    // keep panic messages out of the report; they are folded into FAIL lines
    panic::set_hook(Box::new(|_| {}));
    let mut failed = 0;
    for (n, name, check) in criteria {
        if only.as_ref().is_some_and(|o| !o.contains(&n)) {
            continue;
        }
        let t = Instant::now();
        let result = panic::catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|e| {
            let msg = e.downcast_ref::<String>().cloned().or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()));
            Err(format!("panicked: {}", msg.unwrap_or_default()))
        });
        let secs = t.elapsed().as_secs_f64();
        match result {
            Ok(detail) => println!("PASS criterion {n:>2} {name} [{secs:.1}s]: {detail}"),
            Err(detail) => {
                failed += 1;
                println!("FAIL criterion {n:>2} {name} [{secs:.1}s]: {detail}");
            }
        }
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} criteria failed");
        ExitCode::FAILURE
    }
}
