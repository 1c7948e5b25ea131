//! Independent scalar re-implementations checked against the tape-based
//! forward passes, BLEU and beam search.

use nmt_adapt_core::autodiff::{ParamStore, Segments, Tape};
use nmt_adapt_core::corpus::EOS;
use nmt_adapt_core::eval::{bleu, bleu_tokens, BleuConfig, Smoothing, Tokenization};
use nmt_adapt_core::model::{generate, pack, Critic, CriticDims, DecodeConfig, Model, ModelDims, StepScorer, Strategy};
use nmt_adapt_core::tensor::Matrix;

type Rows = Vec<Vec<f64>>;

struct Xorshift(u64);

impl Xorshift {
    fn next(&mut self) -> u64 {
        let mut x = self.0;
        x ^= x << 13;
        x ^= x >> 7;
        x ^= x << 17;
        self.0 = x;
        x
    }

    fn below(&mut self, n: u64) -> u64 {
        self.next() % n
    }

    fn unit(&mut self) -> f64 {
        (self.next() >> 11) as f64 / (1u64 << 53) as f64
    }
}

fn tensor(s: &ParamStore, name: &str) -> Rows {
    let m = s.get(s.find(name).unwrap_or_else(|| panic!("no tensor {name}")));
    (0..m.rows()).map(|r| m.row(r).to_vec()).collect()
}

fn affine(x: &Rows, s: &ParamStore, name: &str) -> Rows {
    let w = tensor(s, &format!("{name}.w"));
    let b = &tensor(s, &format!("{name}.b"))[0];
    x.iter()
        .map(|row| {
            (0..b.len())
                .map(|j| b[j] + (0..row.len()).map(|i| row[i] * w[i][j]).sum::<f64>())
                .collect()
        })
        .collect()
}

fn layer_norm(x: &Rows, s: &ParamStore, name: &str) -> Rows {
    let g = &tensor(s, &format!("{name}.g"))[0];
    let b = &tensor(s, &format!("{name}.b"))[0];
    x.iter()
        .map(|row| {
            let n = row.len() as f64;
            let mu = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / n;
            row.iter().enumerate().map(|(i, v)| g[i] * (v - mu) / (var + 1e-5).sqrt() + b[i]).collect()
        })
        .collect()
}

fn add(a: &Rows, b: &Rows) -> Rows {
    a.iter().zip(b).map(|(x, y)| x.iter().zip(y).map(|(p, q)| p + q).collect()).collect()
}

fn attention(x: &Rows, mem: &Rows, s: &ParamStore, name: &str, heads: usize, causal: bool) -> Rows {
    let q = affine(x, s, &format!("{name}.q"));
    let k = affine(mem, s, &format!("{name}.k"));
    let v = affine(mem, s, &format!("{name}.v"));
    let d = q[0].len();
    let dh = d / heads;
    let mut out = vec![vec![0.0; d]; x.len()];
    for h in 0..heads {
        let cols = h * dh..(h + 1) * dh;
        for i in 0..x.len() {
            let visible = if causal { i + 1 } else { mem.len() };
            let scores: Vec<f64> = (0..visible)
                .map(|j| cols.clone().map(|c| q[i][c] * k[j][c]).sum::<f64>() / (dh as f64).sqrt())
                .collect();
            let m = scores.iter().cloned().fold(f64::MIN, f64::max);
            let e: Vec<f64> = scores.iter().map(|v| (v - m).exp()).collect();
            let z: f64 = e.iter().sum();
            for c in cols.clone() {
                out[i][c] = (0..visible).map(|j| e[j] / z * v[j][c]).sum();
            }
        }
    }
    affine(&out, s, &format!("{name}.o"))
}

fn feed_forward(x: &Rows, s: &ParamStore, name: &str) -> Rows {
    let h: Rows = affine(x, s, &format!("{name}.up"))
        .into_iter()
        .map(|r| r.into_iter().map(|v| v.max(0.0)).collect())
        .collect();
    affine(&h, s, &format!("{name}.down"))
}

fn embed(ids: &[u32], s: &ParamStore, d: usize) -> Rows {
    let e = tensor(s, "emb");
    ids.iter()
        .enumerate()
        .map(|(t, &id)| {
            (0..d)
                .map(|i| {
                    let freq = 10000f64.powf(-2.0 * (i / 2) as f64 / d as f64);
                    let pe = if i % 2 == 0 { (t as f64 * freq).sin() } else { (t as f64 * freq).cos() };
                    e[id as usize][i] * (d as f64).sqrt() + pe
                })
                .collect()
        })
        .collect()
}

/// Pre-LN encoder–decoder logits for one source/target pair.
fn oracle_logits(m: &Model, src: &[u32], tgt: &[u32]) -> Rows {
    let dims = m.dims();
    let s = m.params();
    let mut x = embed(src, s, dims.d_model);
    for l in 0..dims.enc_layers {
        let h = layer_norm(&x, s, &format!("enc.{l}.ln1"));
        x = add(&x, &attention(&h, &h, s, &format!("enc.{l}.attn"), dims.heads, false));
        let h = layer_norm(&x, s, &format!("enc.{l}.ln2"));
        x = add(&x, &feed_forward(&h, s, &format!("enc.{l}.ff")));
    }
    let z = layer_norm(&x, s, "enc.ln");
    let mut y = embed(tgt, s, dims.d_model);
    for l in 0..dims.dec_layers {
        let h = layer_norm(&y, s, &format!("dec.{l}.ln1"));
        y = add(&y, &attention(&h, &h, s, &format!("dec.{l}.self"), dims.heads, true));
        let h = layer_norm(&y, s, &format!("dec.{l}.ln2"));
        y = add(&y, &attention(&h, &z, s, &format!("dec.{l}.cross"), dims.heads, false));
        let h = layer_norm(&y, s, &format!("dec.{l}.ln3"));
        y = add(&y, &feed_forward(&h, s, &format!("dec.{l}.ff")));
    }
    affine(&layer_norm(&y, s, "dec.ln"), s, "out")
}

fn oracle_model() -> Model {
    let dims = ModelDims {
        vocab: 7,
        d_model: 4,
        heads: 2,
        enc_layers: 2,
        dec_layers: 2,
        ffn: 6,
    };
    let mut m = Model::new(dims, 11).unwrap();
    // Non-trivial norms and biases so every parameter matters.
    let mut r = Xorshift(0x9e37_79b9_7f4a_7c15);
    for t in m.params_mut().tensors_mut() {
        for v in t.data_mut() {
            *v += 0.2 * (r.unit() - 0.5);
        }
    }
    m
}

#[test]
fn transformer_logits_match_scalar_oracle() {
    let m = oracle_model();
    let pairs: [(&[u32], &[u32]); 2] = [(&[5, 6, 3, 4], &[6, 2, 5]), (&[5, 1], &[6, 4, 4, 3, 2])];
    let src: Vec<&[u32]> = pairs.iter().map(|p| p.0).collect();
    let tgt: Vec<&[u32]> = pairs.iter().map(|p| p.1).collect();
    let (src_ids, src_segs) = pack(&src);
    let (tgt_ids, tgt_segs) = pack(&tgt);
    let mut tape = Tape::new();
    let p = m.bind(&mut tape, false);
    let enc = m.encode(&mut tape, &p, &src_ids, &src_segs);
    let logits = m.decode_logits(&mut tape, &p, enc, &tgt_ids, &tgt_segs);
    let got = tape.value(logits);
    let mut row = 0;
    for (s, t) in pairs {
        for want in oracle_logits(&m, s, t) {
            for (a, b) in got.row(row).iter().zip(&want) {
                assert!((a - b).abs() < 1e-10, "row {row}: {a} vs {b}");
            }
            row += 1;
        }
    }
    assert_eq!(row, got.rows());
}

#[test]
fn incremental_decoder_matches_scalar_oracle() {
    let m = oracle_model();
    let src = [5u32, 3, 4, 4];
    let tgt = [6u32, 1, 3, 2];
    let z = m.encode_one(5, &src[1..]).unwrap();
    let want = oracle_logits(&m, &src, &tgt);
    let dec = m.decoder(&z);
    let mut st = dec.start();
    for (t, tok) in tgt.iter().enumerate() {
        let got = dec.step(&mut st, *tok);
        for (a, b) in got.iter().zip(&want[t]) {
            assert!((a - b).abs() < 1e-10);
        }
    }
}

fn selu(x: f64) -> f64 {
    const L: f64 = 1.050_700_987_355_480_5;
    const A: f64 = 1.673_263_242_354_377_3;
    if x > 0.0 {
        L * x
    } else {
        L * A * (x.exp() - 1.0)
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Final state of a GRU with gates ordered (reset, update, candidate) and
/// the reset gate applied to the recurrent candidate term.
fn gru_final(x: &Rows, s: &ParamStore, name: &str, reverse: bool) -> Vec<f64> {
    let gi = affine_named(x, s, &format!("{name}.w_ih"), &format!("{name}.b_ih"));
    let w_hh = tensor(s, &format!("{name}.w_hh"));
    let b_hh = &tensor(s, &format!("{name}.b_hh"))[0];
    let h = w_hh.len();
    let mut state = vec![0.0; h];
    let order: Vec<usize> = if reverse { (0..x.len()).rev().collect() } else { (0..x.len()).collect() };
    for t in order {
        let gh: Vec<f64> = (0..3 * h).map(|j| b_hh[j] + (0..h).map(|i| state[i] * w_hh[i][j]).sum::<f64>()).collect();
        let g = &gi[t];
        state = (0..h)
            .map(|j| {
                let r = sigmoid(g[j] + gh[j]);
                let z = sigmoid(g[h + j] + gh[h + j]);
                let n = (g[2 * h + j] + r * gh[2 * h + j]).tanh();
                (1.0 - z) * n + z * state[j]
            })
            .collect();
    }
    state
}

fn affine_named(x: &Rows, s: &ParamStore, w: &str, b: &str) -> Rows {
    let w = tensor(s, w);
    let b = &tensor(s, b)[0];
    x.iter()
        .map(|row| (0..b.len()).map(|j| b[j] + (0..row.len()).map(|i| row[i] * w[i][j]).sum::<f64>()).collect())
        .collect()
}

fn oracle_critic(c: &Critic, z: &Rows) -> f64 {
    let s = c.params();
    let act = |x: Rows| -> Rows { x.into_iter().map(|r| r.into_iter().map(selu).collect()).collect() };
    let h = act(affine(z, s, "fc1"));
    let h = act(affine(&h, s, "fc2"));
    let mut cat = gru_final(&h, s, "gru.fwd", false);
    cat.extend(gru_final(&h, s, "gru.bwd", true));
    affine(&act(vec![cat]), s, "out")[0][0]
}

#[test]
fn critic_scores_match_scalar_oracle() {
    let dims = CriticDims {
        input: 4,
        fc1: 5,
        fc2: 3,
        gru: 2,
    };
    let c = Critic::new(dims, 5).unwrap();
    let mut r = Xorshift(77);
    let seqs: Vec<Rows> = [3usize, 1, 6]
        .iter()
        .map(|&n| (0..n).map(|_| (0..4).map(|_| 4.0 * r.unit() - 2.0).collect()).collect())
        .collect();
    let flat: Vec<f64> = seqs.iter().flatten().flatten().copied().collect();
    let mut tape = Tape::new();
    let p = c.bind(&mut tape, false);
    let z = tape.leaf(Matrix::from_vec(10, 4, flat));
    let segs = Segments::from_lengths(seqs.iter().map(Vec::len));
    let out = c.score(&mut tape, &p, z, &segs);
    for (i, sq) in seqs.iter().enumerate() {
        let want = oracle_critic(&c, sq);
        assert!((tape.value(out).get(i, 0) - want).abs() < 1e-10);
    }
}

/// Textbook corpus BLEU with n-grams compared as token slices.
fn brute_bleu(hyps: &[Vec<u32>], refs: &[Vec<u32>], order: usize, add_one: bool) -> f64 {
    let mut log_p = 0.0;
    for n in 1..=order {
        let (mut m, mut t) = (0usize, 0usize);
        for (h, r) in hyps.iter().zip(refs) {
            if h.len() < n {
                continue;
            }
            let hg: Vec<&[u32]> = h.windows(n).collect();
            let rg: Vec<&[u32]> = if r.len() >= n { r.windows(n).collect() } else { Vec::new() };
            t += hg.len();
            let mut seen: Vec<&[u32]> = Vec::new();
            for g in &hg {
                if seen.contains(g) {
                    continue;
                }
                seen.push(g);
                let ch = hg.iter().filter(|x| *x == g).count();
                let cr = rg.iter().filter(|x| *x == g).count();
                m += ch.min(cr);
            }
        }
        let p = if add_one && n >= 2 {
            (m as f64 + 1.0) / (t as f64 + 1.0)
        } else if t == 0 {
            0.0
        } else {
            m as f64 / t as f64
        };
        if p == 0.0 {
            return 0.0;
        }
        log_p += p.ln() / order as f64;
    }
    let c: usize = hyps.iter().map(Vec::len).sum();
    let r: usize = refs.iter().map(Vec::len).sum();
    if c == 0 {
        return 0.0;
    }
    let bp = if c > r { 1.0 } else { (1.0 - r as f64 / c as f64).exp() };
    100.0 * bp * log_p.exp()
}

fn random_corpus(r: &mut Xorshift) -> (Vec<Vec<u32>>, Vec<Vec<u32>>) {
    let n = 1 + r.below(6) as usize;
    let alphabet = 2 + r.below(5);
    let sent = |r: &mut Xorshift| -> Vec<u32> { (0..r.below(12)).map(|_| r.below(alphabet) as u32).collect() };
    let refs: Vec<Vec<u32>> = (0..n).map(|_| sent(r)).collect();
    // Hypotheses are mutated references so that matches are plentiful.
    let hyps = refs
        .iter()
        .map(|rf| {
            let mut h: Vec<u32> = rf.iter().copied().filter(|_| r.below(5) != 0).collect();
            if r.below(2) == 0 {
                h.extend(sent(r));
            }
            h
        })
        .collect();
    (hyps, refs)
}

#[test]
fn bleu_matches_brute_force_on_fifty_corpora() {
    let mut r = Xorshift(2024);
    let mut nonzero = 0;
    for _ in 0..50 {
        let (h, rf) = random_corpus(&mut r);
        for (smoothing, add_one) in [(Smoothing::None, false), (Smoothing::AddOne, true)] {
            for order in [1, 2, 4] {
                let cfg = BleuConfig {
                    max_order: order,
                    smoothing,
                    tokenization: Tokenization::Whitespace,
                };
                let got = bleu_tokens(&h, &rf, &cfg).unwrap();
                let want = brute_bleu(&h, &rf, order, add_one);
                assert!((got - want).abs() < 1e-6, "{got} vs {want}");
                nonzero += usize::from(want > 0.0);
            }
        }
    }
    assert!(nonzero > 100, "corpora too sparse to exercise the formula: {nonzero}");
}

#[test]
fn bleu_of_reference_against_itself_is_100() {
    let refs = ["the cat sat on the mat", "a b c d e f g", "one two three four"];
    assert_eq!(bleu(&refs, &refs, &BleuConfig::exact()).unwrap(), 100.0);
    assert_eq!(bleu(&refs, &refs, &BleuConfig::default()).unwrap(), 100.0);
}

/// Scorer whose logits depend on the whole prefix through a hash.
struct HashScorer {
    vocab: usize,
}

impl StepScorer for HashScorer {
    type State = u64;

    fn start(&self) -> u64 {
        0xcbf2_9ce4_8422_2325
    }

    fn step(&self, state: &mut u64, token: u32) -> Vec<f64> {
        *state = (*state ^ u64::from(token)).wrapping_mul(0x100_0000_01b3);
        let mut r = Xorshift(*state | 1);
        (0..self.vocab).map(|_| 3.0 * r.unit()).collect()
    }
}

fn log_softmax(v: &[f64]) -> Vec<f64> {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let z = v.iter().filter(|x| x.is_finite()).map(|x| (x - m).exp()).sum::<f64>().ln() + m;
    v.iter().map(|x| x - z).collect()
}

/// Highest-scoring complete hypothesis by enumeration: sequences that end
/// in EOS, or reach `max_len` tokens.
fn exhaustive(s: &HashScorer, first: u32, max_len: usize, ban: &[bool]) -> (f64, Vec<u32>) {
    fn walk(s: &HashScorer, st: u64, logits: Vec<f64>, prefix: &mut Vec<u32>, score: f64, max_len: usize, ban: &[bool], best: &mut (f64, Vec<u32>)) {
        let masked: Vec<f64> = logits.iter().zip(ban).map(|(l, b)| if *b { f64::NEG_INFINITY } else { *l }).collect();
        let lp = log_softmax(&masked);
        for (t, &l) in lp.iter().enumerate() {
            if !l.is_finite() {
                continue;
            }
            let sc = score + l;
            if t as u32 == EOS {
                if sc > best.0 {
                    *best = (sc, prefix.clone());
                }
                continue;
            }
            prefix.push(t as u32);
            if prefix.len() == max_len {
                if sc > best.0 {
                    *best = (sc, prefix.clone());
                }
            } else {
                let mut st2 = st;
                let next = s.step(&mut st2, t as u32);
                walk(s, st2, next, prefix, sc, max_len, ban, best);
            }
            prefix.pop();
        }
    }
    let mut st = s.start();
    let logits = s.step(&mut st, first);
    let mut best = (f64::NEG_INFINITY, Vec::new());
    walk(s, st, logits, &mut Vec::new(), 0.0, max_len, ban, &mut best);
    best
}

#[test]
fn wide_beam_finds_the_exhaustive_optimum() {
    let s = HashScorer { vocab: 5 };
    let mut ban = vec![false; 5];
    ban[0] = true;
    for first in 0..20u32 {
        let (_, want) = exhaustive(&s, first, 4, &ban);
        let cfg = DecodeConfig {
            strategy: Strategy::Beam(4usize.pow(4)),
            max_len: 4,
        };
        let got = generate(&s, first, &cfg, Some(&ban)).unwrap();
        assert_eq!(got, want, "first token {first}");
    }
}

#[test]
fn beam_of_one_is_greedy() {
    let s = HashScorer { vocab: 6 };
    for first in 0..20u32 {
        let greedy = generate(&s, first, &DecodeConfig { strategy: Strategy::Greedy, max_len: 7 }, None).unwrap();
        let beam = generate(&s, first, &DecodeConfig { strategy: Strategy::Beam(1), max_len: 7 }, None).unwrap();
        assert_eq!(greedy, beam);
    }
}
