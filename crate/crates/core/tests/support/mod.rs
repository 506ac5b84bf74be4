//! Independent reference implementations and randomised checks, shared by
//! the integration tests and the acceptance run.
#![allow(dead_code)]

use std::cell::RefCell;
use std::collections::BTreeMap;
use std::io::Cursor;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use textguided::autograd::{softmax_rows, Tape};
use textguided::checkpoint;
use textguided::experiment::{pretrained_network, select_classes, ExperimentConfig, PhaseConfig};
use textguided::optim::SgdConfig;
use textguided::rng::stream;
use textguided::synth::{generate_world, SyntheticWorld, WorldConfig};
use textguided::train::{
    evaluate_with, object_accuracy, pretrain_object, train, train_step, ObjectDataset, ObjectImage, PretrainConfig,
    Protocol, Strategy,
};
use textguided::video::{average, predict_video, view_predictions, FrameClassifier, FrameGeometry, VideoClip, VideoError};
use textguided::embeddings::{read_binary, read_text, EmbeddingTable, FormatErrorKind};
use textguided::multitask::{build_network, Head, MixedBatch, MultitaskNet, TrunkSpec};
use textguided::relevance::{parse_labels, rank_classes, select_top_m};
use textguided::tensor::Tensor;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

// ---- relevance ------------------------------------------------------------

pub struct TraInstance {
    pub activities: Vec<String>,
    pub classes: Vec<String>,
    pub table: EmbeddingTable,
    pub m: usize,
}

/// Random vocabulary of single tokens and a few stored phrases; labels mix
/// single tokens, phrases, multi-token fallbacks and unembeddable words.
pub fn random_tra_instance(seed: u64) -> TraInstance {
    let mut r = rng(seed);
    let dim = r.random_range(1..=8);
    let vocab: Vec<String> = (0..r.random_range(4..30)).map(|i| format!("w{i}")).collect();
    let mut entries: Vec<(String, Vec<f32>)> = Vec::new();
    let vector = |r: &mut ChaCha8Rng| -> Vec<f32> {
        loop {
            // Small integers make exact ties between different labels likely.
            let v: Vec<f32> = (0..dim).map(|_| r.random_range(-3i32..=3) as f32).collect();
            if v.iter().any(|&x| x != 0.0) {
                return v;
            }
        }
    };
    for w in &vocab {
        entries.push((w.clone(), vector(&mut r)));
    }
    let phrase_count = r.random_range(0..4);
    let mut phrases = Vec::new();
    for _ in 0..phrase_count {
        let p = format!("{}_{}", vocab.choose(&mut r).unwrap(), vocab.choose(&mut r).unwrap());
        if entries.iter().all(|(t, _)| *t != p) {
            entries.push((p.clone(), vector(&mut r)));
            phrases.push(p);
        }
    }
    let table = EmbeddingTable::from_entries(dim, entries.iter().map(|(t, v)| (t.as_str(), v.clone()))).unwrap();

    let label = |r: &mut ChaCha8Rng, allow_unknown: bool| -> String {
        match r.random_range(0..if allow_unknown { 4 } else { 3 }) {
            0 => vocab.choose(r).unwrap().clone(),
            1 if !phrases.is_empty() => phrases.choose(r).unwrap().replace('_', " "),
            1 | 2 => {
                let n = r.random_range(2..=3);
                let mut toks: Vec<String> = (0..n).map(|_| vocab.choose(r).unwrap().clone()).collect();
                if r.random_bool(0.3) {
                    toks.push("unknownword".into());
                }
                toks.join(if r.random() { " " } else { "_" })
            }
            _ => format!("zz{}", r.random_range(0..1000)),
        }
    };
    let mut activities = Vec::new();
    for _ in 0..r.random_range(1..=10) {
        let l = label(&mut r, false);
        if !activities.contains(&l) && oracle_embed(&l, &table).is_some() {
            activities.push(l);
        }
    }
    let mut classes = Vec::new();
    for _ in 0..r.random_range(1..=50) {
        let l = label(&mut r, true);
        if !classes.contains(&l) {
            classes.push(l);
        }
    }
    if activities.is_empty() {
        activities.push(vocab[0].clone());
    }
    let m = r.random_range(0..=classes.len() + 2);
    TraInstance {
        activities,
        classes,
        table,
        m,
    }
}

fn oracle_embed(label: &str, table: &EmbeddingTable) -> Option<Vec<f64>> {
    let tokens: Vec<String> = label
        .split([' ', '_'])
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect();
    if let Some(v) = table.lookup(&tokens.join("_")) {
        return Some(v.iter().map(|&x| x as f64).collect());
    }
    let found: Vec<&[f32]> = tokens.iter().filter_map(|t| table.lookup(t)).collect();
    if found.is_empty() {
        return None;
    }
    let mut mean = vec![0.0; table.dim()];
    for v in &found {
        for (m, &x) in mean.iter_mut().zip(v.iter()) {
            *m += x as f64;
        }
    }
    mean.iter_mut().for_each(|m| *m /= found.len() as f64);
    mean.iter().any(|&x| x != 0.0).then_some(mean)
}

fn oracle_cos(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

/// `(label, kappa)` in rank order by direct summation over every pair.
pub fn brute_force_ranking(inst: &TraInstance) -> Vec<(String, f64)> {
    let mut acts = inst.activities.clone();
    acts.sort();
    let act_vecs: Vec<Vec<f64>> = acts
        .iter()
        .map(|a| oracle_embed(a, &inst.table).expect("activities are embeddable"))
        .collect();
    let mut scored: Vec<(String, f64)> = inst
        .classes
        .iter()
        .filter_map(|c| {
            let y = oracle_embed(c, &inst.table)?;
            Some((c.clone(), act_vecs.iter().map(|x| oracle_cos(x, &y)).sum()))
        })
        .collect();
    // Selection sort on (kappa desc, label asc): no shared comparator code.
    let mut ordered = Vec::with_capacity(scored.len());
    while !scored.is_empty() {
        let mut best = 0;
        for i in 1..scored.len() {
            let (l, k) = &scored[i];
            let (bl, bk) = &scored[best];
            let tie = (k - bk).abs() <= 1e-12;
            if (!tie && k > bk) || (tie && l < bl) {
                best = i;
            }
        }
        ordered.push(scored.remove(best));
    }
    ordered
}

/// Compares the library ranking and selection with the brute force.
pub fn tra_matches_oracle(seed: u64) -> Result<(), String> {
    let inst = random_tra_instance(seed);
    let acts = parse_labels(inst.activities.iter().map(String::as_str)).map_err(|e| e.to_string())?;
    let classes = parse_labels(inst.classes.iter().map(String::as_str)).map_err(|e| e.to_string())?;
    let ranking = rank_classes(&acts, &classes, &inst.table).map_err(|e| e.to_string())?;
    let expected = brute_force_ranking(&inst);
    if ranking.len() != expected.len() {
        return Err(format!("seed {seed}: {} ranked vs {} expected", ranking.len(), expected.len()));
    }
    let got = ranking.classes();
    // Near-ties may legitimately order either way; compare each block of
    // classes whose kappas agree within tolerance as a set.
    let mut i = 0;
    while i < expected.len() {
        let mut j = i + 1;
        while j < expected.len() && (expected[j].1 - expected[i].1).abs() <= 1e-12 {
            j += 1;
        }
        let mut want: Vec<&str> = expected[i..j].iter().map(|e| e.0.as_str()).collect();
        let mut have: Vec<&str> = got[i..j].iter().map(|c| c.label.as_str()).collect();
        if j - i == 1 || (expected[i..j].windows(2).all(|w| w[0].1 == w[1].1)) {
            // Exact ties: label order is part of the contract.
            if want != have {
                return Err(format!("seed {seed}: ranks {i}..{j} {have:?} vs {want:?}"));
            }
        } else {
            want.sort();
            have.sort();
            if want != have {
                return Err(format!("seed {seed}: tie block {i}..{j} {have:?} vs {want:?}"));
            }
        }
        for k in i..j {
            if got[k].rank != k + 1 || (got[k].kappa - expected[k].1).abs() > 1e-12 {
                return Err(format!("seed {seed}: {:?} vs {:?}", got[k], expected[k]));
            }
        }
        i = j;
    }
    let refined = select_top_m(&ranking, inst.m);
    let want: Vec<&str> = got.iter().take(inst.m).map(|c| c.label.as_str()).collect();
    if refined.selected() != want.as_slice() {
        return Err(format!("seed {seed}: selection {:?} vs {want:?}", refined.selected()));
    }
    Ok(())
}

// ---- convolution ----------------------------------------------------------

/// Direct six-loop cross-correlation with zero padding.
pub fn naive_conv(x: &Tensor, k: &Tensor, stride: usize, pad: usize) -> Tensor {
    let s = x.shape();
    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
    let ks = k.shape();
    let (f, kh, kw) = (ks[0], ks[2], ks[3]);
    let ho = (h + 2 * pad - kh) / stride + 1;
    let wo = (w + 2 * pad - kw) / stride + 1;
    let mut out = Tensor::zeros(&[n, f, ho, wo]);
    for b in 0..n {
        for o in 0..f {
            for i in 0..ho {
                for j in 0..wo {
                    let mut acc = 0.0;
                    for ch in 0..c {
                        for di in 0..kh {
                            for dj in 0..kw {
                                let (yi, xj) = ((i * stride + di) as isize - pad as isize, (j * stride + dj) as isize - pad as isize);
                                if yi >= 0 && xj >= 0 && (yi as usize) < h && (xj as usize) < w {
                                    acc += x.get(&[b, ch, yi as usize, xj as usize]) * k.get(&[o, ch, di, dj]);
                                }
                            }
                        }
                    }
                    out.data_mut()[((b * f + o) * ho + i) * wo + j] = acc;
                }
            }
        }
    }
    out
}

fn rand_tensor(shape: &[usize], r: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| r.random_range(-1.0..1.0))
}

/// Forward values and input/kernel gradients of the tape convolution
/// against the naive loop and its linearity: `∂Σ(g·y)/∂x` is the naive
/// convolution's adjoint applied to `g`, checked entry by entry.
pub fn conv_matches_naive(seed: u64) -> Result<(), String> {
    let mut r = rng(seed);
    let (n, c, f) = (r.random_range(1..=3), r.random_range(1..=3), r.random_range(1..=4));
    let (kh, kw) = (r.random_range(1..=3), r.random_range(1..=3));
    let pad = r.random_range(0..=1);
    let stride = r.random_range(1..=2);
    let h = r.random_range(kh.max(2)..=7);
    let w = r.random_range(kw.max(2)..=7);
    let x = rand_tensor(&[n, c, h, w], &mut r);
    let k = rand_tensor(&[f, c, kh, kw], &mut r);
    let want = naive_conv(&x, &k, stride, pad);

    let mut tape = Tape::new();
    let xv = tape.param(x.clone());
    let kv = tape.param(k.clone());
    let y = tape.conv2d(xv, kv, stride, pad).map_err(|e| e.to_string())?;
    if tape.value(y).shape() != want.shape() {
        return Err(format!("seed {seed}: shape {:?} vs {:?}", tape.value(y).shape(), want.shape()));
    }
    for (a, b) in tape.value(y).data().iter().zip(want.data()) {
        if (a - b).abs() > 1e-12 {
            return Err(format!("seed {seed}: forward {a} vs {b}"));
        }
    }
    let g: Vec<f64> = (0..want.numel()).map(|_| r.random_range(-1.0..1.0)).collect();
    let loss = tape.weighted_sum(y, &g).map_err(|e| e.to_string())?;
    tape.backward(loss).map_err(|e| e.to_string())?;
    // The loss is linear in each argument, so unit perturbations through the
    // naive conv give exact partial derivatives.
    let dot = |t: &Tensor| t.data().iter().zip(&g).map(|(a, b)| a * b).sum::<f64>();
    for (which, base, grad) in [("input", &x, tape.grad(xv).unwrap()), ("kernel", &k, tape.grad(kv).unwrap())] {
        for idx in 0..base.numel() {
            let unit = Tensor::from_fn(base.shape(), |i| if i == idx { 1.0 } else { 0.0 });
            let d = if which == "input" {
                dot(&naive_conv(&unit, &k, stride, pad))
            } else {
                dot(&naive_conv(&x, &unit, stride, pad))
            };
            if (grad.data()[idx] - d).abs() > 1e-10 {
                return Err(format!("seed {seed}: {which} grad [{idx}] {} vs {d}", grad.data()[idx]));
            }
        }
    }
    Ok(())
}

// ---- embeddings -----------------------------------------------------------

pub fn random_table(seed: u64) -> EmbeddingTable {
    let mut r = rng(seed);
    let dim = r.random_range(1..=12);
    let count = r.random_range(1..=40);
    let mut t = EmbeddingTable::new(dim);
    let mut i = 0;
    while t.len() < count {
        // Arbitrary bytes other than space and newline, including non-UTF-8.
        let len = r.random_range(1..=8);
        let mut tok: Vec<u8> = (0..len)
            .map(|_| loop {
                let b: u8 = r.random();
                if b != b' ' && b != b'\n' {
                    break b;
                }
            })
            .collect();
        tok.extend_from_slice(format!("{i}").as_bytes());
        i += 1;
        let v: Vec<f32> = (0..dim)
            .map(|_| f32::from_bits(r.random::<u32>() & 0xbfff_ffff))
            .collect();
        if t.lookup_bytes(&tok).is_none() {
            t.insert(&tok, &v).unwrap();
        }
    }
    t
}

pub fn embedding_round_trip(seed: u64) -> Result<(), String> {
    let t = random_table(seed);
    let mut bytes = Vec::new();
    t.write_binary_to(&mut bytes).map_err(|e| e.to_string())?;
    let back = read_binary(Cursor::new(&bytes)).map_err(|e| format!("seed {seed}: {e}"))?;
    let mut again = Vec::new();
    back.write_binary_to(&mut again).map_err(|e| e.to_string())?;
    if again != bytes {
        return Err(format!("seed {seed}: rewritten bytes differ"));
    }
    Ok(())
}

/// `(description, bytes, expected kind, text format?)`
pub fn malformed_embedding_cases() -> Vec<(&'static str, Vec<u8>, FormatErrorKind, bool)> {
    let entry = |tok: &str, v: &[f32]| {
        let mut b = tok.as_bytes().to_vec();
        b.push(b' ');
        for x in v {
            b.extend_from_slice(&x.to_le_bytes());
        }
        b.push(b'\n');
        b
    };
    let good = [b"2 2\n".to_vec(), entry("a", &[1.0, 2.0]), entry("b", &[3.0, 4.0])].concat();
    let mut short = good.clone();
    short.truncate(good.len() - 3);
    let dup = [b"2 2\n".to_vec(), entry("a", &[1.0, 2.0]), entry("a", &[3.0, 4.0])].concat();
    vec![
        ("missing dimension", b"2\n".to_vec(), FormatErrorKind::Header, false),
        ("non-numeric count", b"x 2\n".to_vec(), FormatErrorKind::Header, false),
        ("unterminated header", b"2 2".to_vec(), FormatErrorKind::Header, false),
        ("empty file", Vec::new(), FormatErrorKind::Header, false),
        ("zero entries", b"0 2\n".to_vec(), FormatErrorKind::Empty, false),
        ("zero dimension", b"2 0\n".to_vec(), FormatErrorKind::Empty, false),
        ("short vector", short, FormatErrorKind::Truncated, false),
        ("missing entries", [b"3 2\n".to_vec(), entry("a", &[1.0, 2.0])].concat(), FormatErrorKind::Truncated, false),
        ("duplicate token", dup, FormatErrorKind::Duplicate, false),
        ("text non-numeric value", b"1 2\na 1.0 x\n".to_vec(), FormatErrorKind::Parse, true),
        ("text missing entries", b"3 2\na 1 2\n".to_vec(), FormatErrorKind::Truncated, true),
        ("text duplicate", b"2 1\na 1\na 2\n".to_vec(), FormatErrorKind::Duplicate, true),
        ("text bad header", b"two 1\na 1\n".to_vec(), FormatErrorKind::Header, true),
    ]
}

pub fn malformed_embeddings_rejected() -> Result<(), String> {
    for (what, bytes, kind, text) in malformed_embedding_cases() {
        let res = if text {
            read_text(Cursor::new(bytes))
        } else {
            read_binary(Cursor::new(bytes))
        };
        match res {
            Err(e) if e.format_kind() == Some(kind) => {}
            Err(e) => return Err(format!("{what}: expected {kind}, got {e}")),
            Ok(_) => return Err(format!("{what}: accepted")),
        }
    }
    Ok(())
}

// ---- network invariants ---------------------------------------------------

pub fn small_spec() -> TrunkSpec {
    TrunkSpec {
        in_channels: 1,
        conv_channels: vec![3, 4],
        kernel: 3,
        hidden: 8,
    }
}

pub fn random_net(seed: u64) -> MultitaskNet {
    let mut r = rng(seed);
    let a = r.random_range(2..=5);
    let o = r.random_range(2..=6);
    build_network(a, o, &small_spec(), seed).unwrap()
}

pub fn random_batch(net: &MultitaskNet, seed: u64) -> MixedBatch {
    let mut r = rng(seed ^ 0xba7c);
    let segments = r.random_range(1..=3);
    let videos = r.random_range(0..=3);
    let objects = if videos == 0 { r.random_range(1..=4) } else { r.random_range(0..=4) };
    let size = r.random_range(4..=7);
    let frame = |r: &mut ChaCha8Rng| rand_tensor(&[1, size, size], r);
    MixedBatch {
        segments,
        activity_frames: (0..videos * segments).map(|_| frame(&mut r)).collect(),
        activity_labels: (0..videos).map(|_| r.random_range(0..net.activity_classes)).collect(),
        object_images: (0..objects).map(|_| frame(&mut r)).collect(),
        object_labels: (0..objects).map(|_| r.random_range(0..net.object_classes)).collect(),
    }
}

fn stack(frames: &[Tensor]) -> Tensor {
    let refs: Vec<&Tensor> = frames.iter().collect();
    textguided::multitask::stack(&refs).unwrap()
}

/// Zeroing one head's weights never changes the other head's logits.
pub fn head_isolation(seed: u64) -> Result<(), String> {
    let net = random_net(seed);
    let mut r = rng(seed ^ 0x15);
    let input = stack(&(0..3).map(|_| rand_tensor(&[1, 6, 6], &mut r)).collect::<Vec<_>>());
    for (zeroed, watched) in [(Head::Object, Head::Activity), (Head::Activity, Head::Object)] {
        let before = net.logits(&input, watched).unwrap();
        let mut probe = net.clone();
        for name in probe.head_param_names(zeroed) {
            probe.params.get_mut(&name).unwrap().data_mut().fill(0.0);
        }
        if probe.logits(&input, watched).unwrap() != before {
            return Err(format!("seed {seed}: zeroing {zeroed:?} moved {watched:?} logits"));
        }
    }
    Ok(())
}

/// `total·N == n_act·act + n_obj·obj` within 1e-12, where `N` counts frames.
pub fn loss_decomposition(seed: u64) -> Result<(), String> {
    let net = random_net(seed);
    let batch = random_batch(&net, seed);
    let l = net
        .forward_loss(&batch, false, &mut rng(0))
        .map_err(|e| e.to_string())?;
    let (na, no) = (batch.activity_count() as f64, batch.object_count() as f64);
    let rhs = na * l.activity.unwrap_or(0.0) + no * l.object.unwrap_or(0.0);
    let lhs = l.total * (na + no);
    if (lhs - rhs).abs() > 1e-12 * lhs.abs().max(1.0) {
        return Err(format!("seed {seed}: {lhs} vs {rhs}"));
    }
    if (batch.activity_count() == 0) != l.activity.is_none() || (batch.object_count() == 0) != l.object.is_none() {
        return Err(format!("seed {seed}: absent task reported a loss"));
    }
    Ok(())
}

/// The activity-head gradient of a mixed batch equals that of its activity
/// samples alone, scaled by their share of the batch.
pub fn object_samples_leave_activity_head_gradient(seed: u64) -> Result<(), String> {
    let net = random_net(seed);
    let mut batch = random_batch(&net, seed);
    if batch.activity_count() == 0 || batch.object_count() == 0 {
        let mut r = rng(seed);
        batch.segments = 1;
        batch.activity_frames = vec![rand_tensor(&[1, 5, 5], &mut r)];
        batch.activity_labels = vec![0];
        batch.object_images = vec![rand_tensor(&[1, 5, 5], &mut r)];
        batch.object_labels = vec![1];
    }
    let grads = |b: &MixedBatch| -> BTreeMap<String, Tensor> {
        let mut tape = Tape::new();
        let bound = net.bind(&mut tape, |n| n.starts_with(Head::Activity.prefix()));
        let (total, _, _) = net.loss_on_tape(&mut tape, &bound, b, false, &mut rng(0)).unwrap();
        tape.backward(total).unwrap();
        bound
            .iter()
            .filter(|(n, _)| n.starts_with(Head::Activity.prefix()))
            .map(|(n, v)| (n.to_string(), tape.grad(v).unwrap().clone()))
            .collect()
    };
    let mixed = grads(&batch);
    let share = batch.activity_count() as f64 / batch.len() as f64;
    let alone = grads(&MixedBatch {
        object_images: vec![],
        object_labels: vec![],
        ..batch.clone()
    });
    for (name, g) in &mixed {
        for (a, b) in g.data().iter().zip(alone[name].data()) {
            if (a - share * b).abs() > 1e-12 {
                return Err(format!("seed {seed}: {name} {a} vs {}", share * b));
            }
        }
    }
    Ok(())
}

// ---- training -------------------------------------------------------------

pub fn tiny_world_config(seed: u64) -> WorldConfig {
    WorldConfig {
        activities: 3,
        objects: 6,
        relevant_per_activity: 1,
        latent_dim: 4,
        train_clips_per_activity: 4,
        test_clips_per_activity: 2,
        train_images_per_object: 6,
        test_images_per_object: 2,
        frames_per_video: 6,
        embed_dim: 6,
        seed,
        ..WorldConfig::default()
    }
}

pub fn tiny_experiment(seed: u64) -> ExperimentConfig {
    let phase = |iterations| PhaseConfig {
        iterations,
        learning_rate: 0.1,
        weight_decay: 5e-4,
        batch_size: 8,
    };
    ExperimentConfig {
        world: tiny_world_config(seed),
        trunk: small_spec(),
        pretrain: phase(5),
        finetune: phase(6),
        seeds: vec![seed],
        ..ExperimentConfig::default()
    }
}

/// Checkpoint bytes and metrics TSV of one finetuning run.
pub fn train_artifacts(world: &SyntheticWorld, config: &ExperimentConfig, strategy: Strategy, activity_only: bool, seed: u64) -> Result<(Vec<u8>, Vec<u8>), String> {
    let mut net = pretrained_network(world, config, seed).map_err(|e| e.to_string())?;
    let mut tc = config.train_config(strategy, seed);
    tc.activity_only = activity_only;
    let log = train(&mut net, &world.train_clips, &world.train_objects, &tc).map_err(|e| e.to_string())?;
    let mut metrics = Vec::new();
    log.write_tsv(&mut metrics).map_err(|e| e.to_string())?;
    Ok((checkpoint::encode(&net.to_checkpoint()), metrics))
}

pub fn training_is_deterministic(seed: u64) -> Result<(), String> {
    let config = tiny_experiment(seed);
    let world = generate_world(&config.world).map_err(|e| e.to_string())?;
    let refined = select_classes(&world, config.m()).map_err(|e| e.to_string())?;
    for strategy in config.strategies(&refined) {
        let first = train_artifacts(&world, &config, strategy.clone(), false, seed)?;
        let second = train_artifacts(&world, &config, strategy.clone(), false, seed)?;
        if first.0 != second.0 {
            return Err(format!("seed {seed}: {strategy} checkpoints differ"));
        }
        if first.1 != second.1 {
            return Err(format!("seed {seed}: {strategy} metric logs differ"));
        }
    }
    Ok(())
}

/// A multitask strategy forced to the activity-only split is the baseline.
pub fn activity_only_matches_baseline(seed: u64) -> Result<(), String> {
    let config = tiny_experiment(seed);
    let world = generate_world(&config.world).map_err(|e| e.to_string())?;
    let refined = select_classes(&world, config.m()).map_err(|e| e.to_string())?;
    let baseline = train_artifacts(&world, &config, Strategy::Baseline, false, seed)?;
    for strategy in [Strategy::ObjectIncorporated, Strategy::text_guided(&refined)] {
        if train_artifacts(&world, &config, strategy.clone(), true, seed)? != baseline {
            return Err(format!("seed {seed}: activity-only {strategy} differs from baseline"));
        }
    }
    Ok(())
}

/// One object-only step moves the trunk (and so activity logits) but never
/// the activity head.
pub fn trunk_is_shared(seed: u64) -> Result<(), String> {
    let mut net = random_net(seed);
    let mut r = rng(seed ^ 0x7a);
    let probe = stack(&[rand_tensor(&[1, 6, 6], &mut r)]);
    let before_logits = net.logits(&probe, Head::Activity).unwrap();
    let before_head: Vec<Tensor> = net
        .head_param_names(Head::Activity)
        .iter()
        .map(|n| net.params.get(n).unwrap().clone())
        .collect();
    let batch = MixedBatch {
        segments: 1,
        activity_frames: vec![],
        activity_labels: vec![],
        object_images: (0..4).map(|_| rand_tensor(&[1, 6, 6], &mut r)).collect(),
        object_labels: (0..4).map(|i| i % net.object_classes).collect(),
    };
    let sgd = SgdConfig::scaled_schedule(0.5, 1e-3, 10);
    train_step(&mut net, &batch, &sgd, 0, &mut stream(seed, "dropout")).map_err(|e| e.to_string())?;
    let after_head: Vec<Tensor> = net
        .head_param_names(Head::Activity)
        .iter()
        .map(|n| net.params.get(n).unwrap().clone())
        .collect();
    if after_head != before_head {
        return Err(format!("seed {seed}: activity head moved"));
    }
    if net.logits(&probe, Head::Activity).unwrap() == before_logits {
        return Err(format!("seed {seed}: trunk did not move"));
    }
    Ok(())
}

fn separable_objects(count: usize, seed: u64) -> ObjectDataset {
    let mut r = rng(seed);
    let images = (0..count)
        .map(|i| {
            let label = i % 2;
            // Horizontal versus vertical stripes, randomly phased.
            let phase = r.random_range(0..4);
            let image = Tensor::from_fn(&[1, 16, 16], |p| {
                let (y, x) = (p / 16, p % 16);
                let t = if label == 0 { y } else { x };
                let stripe = if (t + phase) % 4 < 2 { 1.0 } else { -1.0 };
                stripe + 0.1 * r.random_range(-1.0..1.0)
            });
            ObjectImage { image, label }
        })
        .collect();
    ObjectDataset {
        class_labels: vec!["horizontal".into(), "vertical".into()],
        images,
    }
}

fn pretrain_config(iterations: usize, seed: u64) -> PretrainConfig {
    PretrainConfig {
        batch_size: 8,
        sgd: SgdConfig::scaled_schedule(0.1, 0.0, iterations),
        dropout_rate: 0.0,
        seed,
        geometry: FrameGeometry::default(),
    }
}

/// `(test accuracy, activity head untouched)` after pretraining on two
/// separable object classes.
pub fn pretrain_separable(iterations: usize, seed: u64) -> Result<(f64, bool), String> {
    let mut net = build_network(3, 2, &small_spec(), seed).map_err(|e| e.to_string())?;
    let before = net.clone();
    pretrain_object(&mut net, &separable_objects(64, seed), &pretrain_config(iterations, seed)).map_err(|e| e.to_string())?;
    let test = separable_objects(100, seed ^ 0xffff);
    let acc = object_accuracy(&net, &test.images, 12).map_err(|e| e.to_string())?;
    let head_same = net
        .head_param_names(Head::Activity)
        .iter()
        .all(|n| net.params.get(n) == before.params.get(n));
    Ok((acc, head_same))
}

pub fn zero_iteration_pretrain_is_identity(seed: u64) -> bool {
    let mut net = build_network(3, 2, &small_spec(), seed).unwrap();
    let before = net.clone();
    let log = pretrain_object(&mut net, &separable_objects(8, seed), &pretrain_config(0, seed)).unwrap();
    log.is_empty() && net.params == before.params
}

// ---- synthetic relevance --------------------------------------------------

pub fn random_world_config(seed: u64) -> WorldConfig {
    let mut r = rng(seed ^ 0x3071d);
    let activities: usize = r.random_range(2..=6);
    let relevant: usize = r.random_range(1..=8);
    let objects = 2 * relevant + r.random_range(0..=1);
    let per = r.random_range(relevant.div_ceil(activities)..=relevant);
    let latent_dim = activities + r.random_range(1..=4);
    WorldConfig {
        activities,
        objects,
        relevant_per_activity: per,
        latent_dim,
        embed_dim: latent_dim + r.random_range(0..=8),
        train_clips_per_activity: 1,
        test_clips_per_activity: 1,
        train_images_per_object: 1,
        test_images_per_object: 1,
        frames_per_video: 3,
        seed,
        ..WorldConfig::default()
    }
}

pub fn synthetic_tra_recovers_truth(seed: u64) -> Result<(), String> {
    let world = generate_world(&random_world_config(seed)).map_err(|e| e.to_string())?;
    let union = world.relevant_union();
    let refined = select_classes(&world, union.len()).map_err(|e| e.to_string())?;
    let got: std::collections::BTreeSet<String> = refined.selected().iter().cloned().collect();
    if got != union {
        return Err(format!("seed {seed}: selected {got:?}, truth {union:?}"));
    }
    Ok(())
}

// ---- evaluation protocol --------------------------------------------------

pub fn random_clip(frames: usize, size: usize, label: usize, r: &mut ChaCha8Rng) -> VideoClip {
    VideoClip::new(
        format!("clip{label}"),
        label,
        (0..frames).map(|_| rand_tensor(&[1, size, size], r)).collect(),
    )
    .unwrap()
}

/// A network whose activity logits are its head bias, whatever the input.
pub fn constant_logit_net(bias: &[f64]) -> MultitaskNet {
    let mut net = build_network(bias.len(), 2, &small_spec(), 0).unwrap();
    let names: Vec<String> = net.params.names().map(str::to_string).collect();
    for name in names {
        net.params.get_mut(&name).unwrap().data_mut().fill(0.0);
    }
    net.params
        .get_mut("head.activity.bias")
        .unwrap()
        .data_mut()
        .copy_from_slice(bias);
    net
}

pub fn protocol_checks(seed: u64) -> Result<(), String> {
    let mut r = rng(seed);
    let net = random_net(seed);
    let frames = r.random_range(1..=40);
    let clip = random_clip(frames, 16, 0, &mut r);
    let views = view_predictions(&net, &clip, &[0.1], 12).map_err(|e| e.to_string())?;
    if views.len() != 250 {
        return Err(format!("seed {seed}: {} views", views.len()));
    }
    let probs = predict_video(&net, &clip, &[0.1], 12).map_err(|e| e.to_string())?;
    let sum: f64 = probs.iter().sum();
    if (sum - 1.0).abs() > 1e-9 {
        return Err(format!("seed {seed}: probabilities sum to {sum}"));
    }
    let mut shuffled = views.clone();
    shuffled.shuffle(&mut r);
    for (a, b) in average(&shuffled).iter().zip(&probs) {
        if (a - b).abs() > 1e-12 {
            return Err(format!("seed {seed}: shuffled average {a} vs {b}"));
        }
    }

    let bias: Vec<f64> = (0..r.random_range(2..=6)).map(|_| r.random_range(-3.0..3.0)).collect();
    let constant = constant_logit_net(&bias);
    let single = softmax_rows(&Tensor::new(vec![1, bias.len()], bias.clone()).unwrap()).unwrap();
    let aggregate = predict_video(&constant, &clip, &[0.0], 12).map_err(|e| e.to_string())?;
    if aggregate != single.data() {
        return Err(format!("seed {seed}: {aggregate:?} vs single-frame {:?}", single.data()));
    }
    Ok(())
}

/// Scores every view with fresh uniform-random logits.
pub struct RandomScorer {
    pub classes: usize,
    pub rng: RefCell<ChaCha8Rng>,
}

impl FrameClassifier for RandomScorer {
    fn activity_probabilities(&self, frames: &[Tensor]) -> Result<Vec<Vec<f64>>, VideoError> {
        let mut r = self.rng.borrow_mut();
        Ok(frames
            .iter()
            .map(|_| {
                let logits: Vec<f64> = (0..self.classes).map(|_| r.random_range(-1.0..1.0)).collect();
                softmax_rows(&Tensor::new(vec![1, self.classes], logits).unwrap())
                    .unwrap()
                    .into_data()
            })
            .collect())
    }
}

/// `(accuracy, 3σ binomial bound)` of random scoring on `n` clips.
pub fn random_scoring_accuracy(classes: usize, n: usize, seed: u64) -> (f64, f64) {
    let mut r = rng(seed);
    let clips: Vec<VideoClip> = (0..n).map(|i| random_clip(1, 12, i % classes, &mut r)).collect();
    let scorer = RandomScorer {
        classes,
        rng: RefCell::new(rng(seed ^ 1)),
    };
    let report = evaluate_with(&scorer, classes, &clips, &[0.0], 12, Protocol::SingleFrame).unwrap();
    let p = 1.0 / classes as f64;
    (report.accuracy(), 3.0 * (p * (1.0 - p) / n as f64).sqrt())
}
