mod common;

use common::{loop_free_program, naive_bundle, rng};
use depattn::asm::{parse_listing, tokenize, Vocabulary};
use depattn::closure::ConnectivityGraph;
use depattn::deps::AnalysisOptions;
use depattn::encoder::{encode, EncoderConfig, EncoderInput, EncoderState, LinearHead, Mode};
use depattn::mask::{build_bundle, NEG_INF};
use depattn::pretrain::*;
use depattn::synth::{synthesize, SynthConfig};
use ndarray::Array2;
use proptest::prelude::*;
use rand::Rng;

/// 50 `inc <reg>` instructions: two eligible tokens each.
fn hundred_eligible() -> (depattn::asm::TokenSequence, Vocabulary) {
    let regs = ["rax", "rbx", "rcx", "rdx", "rsi"];
    let text: String = (0..50).map(|i| format!("inc {}\n", regs[i % 5])).collect();
    let f = parse_listing(&format!(".func f\n{text}")).unwrap().remove(0);
    let vocab = Vocabulary::from_functions(std::slice::from_ref(&f), 1);
    let seq = tokenize(&f.instructions, &vocab, 512);
    (seq, vocab)
}

#[test]
fn mlm_sampler_statistics() {
    let (seq, vocab) = hundred_eligible();
    assert_eq!(eligible_positions(&seq).len(), 100);
    let mut r = rng(1);
    let (mut masked, mut kinds) = (0usize, [0usize; 3]);
    let trials = 10_000;
    for _ in 0..trials {
        let (tokens, pert) = mlm_perturb(&seq, 0.15, vocab.ordinary_ids(), &mut r);
        masked += pert.len();
        for (k, &p) in pert.kinds.iter().zip(&pert.positions) {
            assert!(!seq.is_cls(p) && !seq.is_inst(p));
            match k {
                Replacement::Mask => {
                    kinds[0] += 1;
                    assert_eq!(tokens[p], depattn::asm::vocab::MASK_ID);
                }
                Replacement::Random => {
                    kinds[1] += 1;
                    assert!(vocab.ordinary_ids().contains(&tokens[p]));
                }
                Replacement::Unchanged => {
                    kinds[2] += 1;
                    assert_eq!(tokens[p], seq.tokens[p]);
                }
            }
        }
    }
    let frac = masked as f64 / (100 * trials) as f64;
    assert!((frac - 0.15).abs() <= 0.01, "mask fraction {frac}");
    let total = masked as f64;
    for (got, want) in kinds.iter().zip([0.8, 0.1, 0.1]) {
        assert!((*got as f64 / total - want).abs() <= 0.02);
    }
}

#[test]
fn mlm_without_eligible_tokens_is_empty() {
    let seq = tokenize(&[], &Vocabulary::reserved_only(), 16);
    let (tokens, pert) = mlm_perturb(&seq, 0.15, 9..12, &mut rng(0));
    assert!(pert.is_empty());
    assert_eq!(tokens, seq.tokens);
    let mut g = LinearHead::init(4, 12, 0.1, &mut rng(0)).zeros_like();
    let head = LinearHead::init(4, 12, 0.1, &mut rng(0));
    let (loss, dh) = mlm_loss(&Array2::zeros((1, 4)), &pert, &head, &mut g);
    assert_eq!(loss, 0.0);
    assert!(dh.iter().all(|&x| x == 0.0));
}

#[test]
fn mlm_perturbation_is_seeded() {
    let (seq, vocab) = hundred_eligible();
    let a = mlm_perturb(&seq, 0.15, vocab.ordinary_ids(), &mut rng(4));
    let b = mlm_perturb(&seq, 0.15, vocab.ordinary_ids(), &mut rng(4));
    assert_eq!(a, b);
}

fn random_graph(r: &mut impl Rng, n: usize, p: f64) -> ConnectivityGraph {
    let mut edges = Vec::new();
    for u in 0..n {
        for v in u + 1..n {
            if r.random_bool(p) {
                edges.push((u, v, r.random_range(1..5)));
            }
        }
    }
    ConnectivityGraph::from_edges(n, edges).unwrap()
}

#[test]
fn mdm_sampler_statistics() {
    let mut r = rng(2);
    let (mut nodes, trials) = (0usize, 10_000);
    for t in 0..trials {
        let con = random_graph(&mut r, 20, [0.1, 0.3, 0.8][t % 3]);
        let s = mdm_sample(&con, 0.4, &mut r);
        nodes += s.nodes.len();
        let chosen: std::collections::BTreeSet<usize> = s.nodes.iter().copied().collect();
        let touches = |&(u, v): &(usize, usize)| chosen.contains(&u) || chosen.contains(&v);
        assert!(s.positives.iter().all(|e| con.connected(e.0, e.1) && touches(e)));
        assert!(s.negatives.iter().all(|e| !con.connected(e.0, e.1) && e.0 < e.1 && touches(e)));
        let complement = (0..20)
            .flat_map(|u| (u + 1..20).map(move |v| (u, v)))
            .filter(|e| touches(e) && !con.connected(e.0, e.1))
            .count();
        assert_eq!(s.negatives.len(), s.positives.len().min(complement));
        let mut negs = s.negatives.clone();
        negs.dedup();
        assert_eq!(negs.len(), s.negatives.len());
    }
    let frac = nodes as f64 / (20 * trials) as f64;
    assert!((frac - 0.4).abs() <= 0.02, "node fraction {frac}");
}

#[test]
fn mdm_edge_cases() {
    let empty = ConnectivityGraph::from_edges(6, []).unwrap();
    let s = mdm_sample(&empty, 0.4, &mut rng(0));
    assert!(s.is_empty());
    let seq = tokenize(&[], &Vocabulary::reserved_only(), 4);
    let (out, dh) = mdm_loss(&Array2::zeros((1, 2)), &s, &seq);
    assert_eq!((out.loss, out.total), (0.0, 0));
    assert!(dh.iter().all(|&x| x == 0.0));

    let complete = ConnectivityGraph::from_edges(5, (0..5).flat_map(|u| (u + 1..5).map(move |v| (u, v, 1)))).unwrap();
    let s = mdm_sample(&complete, 0.4, &mut rng(0));
    assert_eq!(s.positives.len(), 7);
    assert!(s.negatives.is_empty());
}

#[test]
fn mdm_loss_at_zero_logit_is_ln2() {
    let f = parse_listing(".func f\nmov eax, 1\nadd ebx, eax\nmov ecx, 2\n").unwrap().remove(0);
    let vocab = Vocabulary::from_functions(std::slice::from_ref(&f), 1);
    let seq = tokenize(&f.instructions, &vocab, 64);
    let s = EdgeSample { nodes: vec![0], positives: vec![(0, 1)], negatives: vec![(0, 2)] };
    let (out, _) = mdm_loss(&Array2::zeros((seq.len(), 4)), &s, &seq);
    assert!((out.loss - 2.0 * std::f64::consts::LN_2).abs() < 1e-12);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn perturbed_bundle_matches_rule(seed in any::<u64>()) {
        let mut r = rng(seed);
        let f = loop_free_program(&mut r, 10);
        let vocab = Vocabulary::from_functions(std::slice::from_ref(&f), 1);
        let ex = TrainExample::new(&f, &vocab, &AnalysisOptions::default(), 512, 512).unwrap();
        let s = mdm_sample(&ex.con, 0.4, &mut r);
        let pert = perturb_bundle(&ex.bundle, &s, &ex.seq, 1);
        let (allowed, dist) = naive_bundle(&ex.seq, &depattn::deps::dependence_graph(&f, &AnalysisOptions::default()).unwrap());
        let n = ex.seq.len();
        let pos = |t: usize| ex.seq.inst_positions[t];
        let mut expect_allowed: Array2<bool> = Array2::from_shape_vec((n, n), allowed).unwrap();
        let mut expect_r: Array2<u32> = Array2::from_shape_vec((n, n), dist).unwrap();
        for &(u, v) in &s.positives {
            for (a, b) in [(pos(u), pos(v)), (pos(v), pos(u))] {
                expect_allowed[[a, b]] = false;
                expect_r[[a, b]] = 0;
            }
        }
        for &(u, v) in &s.negatives {
            for (a, b) in [(pos(u), pos(v)), (pos(v), pos(u))] {
                expect_allowed[[a, b]] = true;
                expect_r[[a, b]] = 1;
            }
        }
        prop_assert_eq!(&pert.allowed, &expect_allowed);
        prop_assert_eq!(&pert.r, &expect_r);
        prop_assert_eq!(&pert.allowed, &pert.allowed.t().to_owned());
        let empty = perturb_bundle(&ex.bundle, &EdgeSample::default(), &ex.seq, 1);
        prop_assert_eq!(&empty, &ex.bundle);
    }

    #[test]
    fn deleted_edges_receive_no_attention(seed in any::<u64>()) {
        let mut r = rng(seed);
        let f = loop_free_program(&mut r, 10);
        let vocab = Vocabulary::from_functions(std::slice::from_ref(&f), 1);
        let ex = TrainExample::new(&f, &vocab, &AnalysisOptions::default(), 512, 512).unwrap();
        let s = mdm_sample(&ex.con, 0.4, &mut r);
        let pert = perturb_bundle(&ex.bundle, &s, &ex.seq, 1);
        let cfg = EncoderConfig { vocab_size: vocab.len(), hidden: 8, heads: 2, ffn: 16, init_std: 0.5, ..Default::default() };
        let state = EncoderState::init(&cfg, &mut r).unwrap();
        let input = EncoderInput::new(&ex.seq, &pert, cfg.r_max, NEG_INF);
        let trace = encode(&input, &state, Mode::Eval).unwrap();
        for &(u, v) in &s.positives {
            let (a, b) = (ex.seq.inst_positions[u], ex.seq.inst_positions[v]);
            for l in 0..cfg.layers {
                for h in 0..cfg.heads {
                    prop_assert!(trace.attention(l, h)[[a, b]] < 1e-12);
                    prop_assert!(trace.attention(l, h)[[b, a]] < 1e-12);
                }
            }
        }
    }
}

fn small_corpus() -> (Vec<TrainExample>, Vocabulary) {
    let corpus = synthesize(&SynthConfig { functions: 12, ..Default::default() }, 3).unwrap();
    let funcs = corpus.all_functions();
    let vocab = Vocabulary::from_functions(&funcs, 1);
    let ex = funcs
        .iter()
        .map(|f| TrainExample::new(f, &vocab, &AnalysisOptions::default(), 512, 512).unwrap())
        .collect();
    (ex, vocab)
}

fn tiny_state(vocab: &Vocabulary) -> EncoderState {
    let cfg = EncoderConfig { vocab_size: vocab.len(), hidden: 16, heads: 2, ffn: 32, ..Default::default() };
    EncoderState::init(&cfg, &mut rng(9)).unwrap()
}

#[test]
fn total_is_the_sum_of_both_losses() {
    let (ex, vocab) = small_corpus();
    let mut state = tiny_state(&vocab);
    let cfg = PretrainConfig { steps: 5, batch: 4, ..Default::default() };
    let log = pretrain(&mut state, &ex, &vocab, &cfg, 1, |_| {}).unwrap();
    for m in &log {
        assert!((m.total - (m.mlm_loss + m.mdm_loss)).abs() < 1e-6);
    }
}

#[test]
fn single_threaded_runs_are_bitwise_reproducible() {
    let (ex, vocab) = small_corpus();
    let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
    let run = || {
        pool.install(|| {
            let mut state = tiny_state(&vocab);
            let cfg = PretrainConfig { steps: 6, batch: 4, ..Default::default() };
            let log = pretrain(&mut state, &ex, &vocab, &cfg, 7, |_| {}).unwrap();
            (metrics_csv(&log), state)
        })
    };
    let (a, sa) = run();
    let (b, sb) = run();
    assert_eq!(a, b);
    assert_eq!(sa.params(), sb.params());
}

#[test]
fn parallel_and_serial_steps_agree() {
    let (ex, vocab) = small_corpus();
    let cfg = PretrainConfig { steps: 3, batch: 6, ..Default::default() };
    let run = |threads| {
        rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap().install(|| {
            let mut state = tiny_state(&vocab);
            metrics_csv(&pretrain(&mut state, &ex, &vocab, &cfg, 7, |_| {}).unwrap())
        })
    };
    assert_eq!(run(1), run(3));
}

#[test]
fn pretraining_rejects_an_empty_corpus() {
    let vocab = Vocabulary::reserved_only();
    let mut state = tiny_state(&vocab);
    let err = pretrain(&mut state, &[], &vocab, &PretrainConfig::default(), 0, |_| {}).unwrap_err();
    assert!(matches!(err, depattn::Error::EmptyCorpus));
}

#[test]
fn bundle_of_example_matches_builder() {
    let (ex, _) = small_corpus();
    for e in &ex {
        assert_eq!(e.bundle, build_bundle(&e.seq, &e.con));
    }
}
