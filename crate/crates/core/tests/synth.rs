mod common;

use std::collections::BTreeSet;

use common::rng;
use depattn::asm::{tokenize, Operand, Vocabulary};
use depattn::closure::connectivity;
use depattn::deps::{dependence_graph, AnalysisOptions, DependenceGraph, EdgeKind};
use depattn::synth::{random_function, random_renaming, rename, reorder, synthesize, SynthConfig};
use proptest::prelude::*;

type Edges = BTreeSet<(usize, usize, EdgeKind)>;

/// Relabels `g` by `perm`, where new node `i` is old node `perm[i]`.
fn relabel(g: &DependenceGraph, perm: &[usize]) -> Edges {
    let mut inv = vec![0; perm.len()];
    for (new, &old) in perm.iter().enumerate() {
        inv[old] = new;
    }
    g.edges.iter().map(|&(u, v, k)| (inv[u], inv[v], k)).collect()
}

fn all_options() -> [AnalysisOptions; 3] {
    [
        AnalysisOptions::default(),
        AnalysisOptions { flags: true, ..Default::default() },
        AnalysisOptions { flags: true, address_uses: true, ..Default::default() },
    ]
}

fn synth_cfg(branch_prob: f64) -> SynthConfig {
    SynthConfig { branch_prob, ..Default::default() }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(96))]

    #[test]
    fn reordered_variant_is_isomorphic_under_perm(seed in any::<u64>(), branchy in 0.0f64..0.5) {
        let mut r = rng(seed);
        let sf = random_function("f", &synth_cfg(branchy), &mut r);
        let (moved, perm) = reorder(&sf.func, &mut r).unwrap();
        let mut sorted = perm.clone();
        sorted.sort_unstable();
        prop_assert_eq!(sorted, (0..sf.func.instructions.len()).collect::<Vec<_>>());
        for (new, &old) in perm.iter().enumerate() {
            prop_assert_eq!(&moved.instructions[new].raw_text, &sf.func.instructions[old].raw_text);
        }
        for opts in all_options() {
            let a = dependence_graph(&sf.func, &opts).unwrap();
            let b = dependence_graph(&moved, &opts).unwrap();
            prop_assert_eq!(relabel(&a, &perm), b.edges.clone(), "options {:?}", opts);
            let ca = connectivity(&a, 512).unwrap();
            let cb = connectivity(&b, 512).unwrap();
            for (new_u, &old_u) in perm.iter().enumerate() {
                for (new_v, &old_v) in perm.iter().enumerate() {
                    prop_assert_eq!(cb.distance(new_u, new_v), ca.distance(old_u, old_v));
                }
            }
        }
    }

    #[test]
    fn renamed_variant_keeps_distances_and_changes_tokens(seed in any::<u64>()) {
        let mut r = rng(seed);
        let sf = random_function("f", &synth_cfg(0.15), &mut r);
        let map = random_renaming(&mut r);
        let renamed = rename(&sf.func, &map);
        for opts in all_options() {
            let a = dependence_graph(&sf.func, &opts).unwrap();
            let b = dependence_graph(&renamed, &opts).unwrap();
            prop_assert_eq!(&a.edges, &b.edges);
            let (ca, cb) = (connectivity(&a, 512).unwrap(), connectivity(&b, 512).unwrap());
            prop_assert_eq!(ca.edges().collect::<Vec<_>>(), cb.edges().collect::<Vec<_>>());
        }
        let vocab = Vocabulary::from_functions(&[sf.func.clone(), renamed.clone()], 1);
        let ta = tokenize(&sf.func.instructions, &vocab, 512);
        let tb = tokenize(&renamed.instructions, &vocab, 512);
        prop_assert_eq!(ta.len(), tb.len());
        let used: BTreeSet<_> = sf
            .func
            .instructions
            .iter()
            .flat_map(|i| &i.operands)
            .flat_map(|op| match op {
                Operand::Register(reg) => vec![*reg],
                Operand::Memory(m) => m.address_registers().collect(),
                _ => Vec::new(),
            })
            .map(|reg| reg.gpr)
            .collect();
        if used.iter().any(|g| map.get(g).is_some_and(|h| h != g)) {
            prop_assert_ne!(ta.tokens, tb.tokens);
        }
    }
}

#[test]
fn fixed_seed_gives_identical_corpus() {
    let cfg = SynthConfig { functions: 30, ..Default::default() };
    let a = synthesize(&cfg, 11).unwrap();
    let b = synthesize(&cfg, 11).unwrap();
    assert_eq!(a.listing(), b.listing());
    assert_eq!(a.variants.iter().map(|v| v.perm.clone()).collect::<Vec<_>>(), b.variants.iter().map(|v| v.perm.clone()).collect::<Vec<_>>());
    assert_ne!(a.listing(), synthesize(&cfg, 12).unwrap().listing());
}

#[test]
fn corpus_variants_match_their_sources() {
    let cfg = SynthConfig { functions: 40, ..Default::default() };
    let corpus = synthesize(&cfg, 5).unwrap();
    let opts = AnalysisOptions::default();
    let mut reordered = 0;
    for v in &corpus.variants {
        let src = &corpus.functions[v.source].func;
        let a = dependence_graph(src, &opts).unwrap();
        let b = dependence_graph(&v.func, &opts).unwrap();
        assert_eq!(relabel(&a, &v.perm), b.edges, "{}", v.func.name);
        reordered += usize::from(v.perm.iter().enumerate().any(|(i, &p)| i != p));
    }
    assert!(reordered * 2 > corpus.variants.len(), "only {reordered} variants moved an instruction");
}
