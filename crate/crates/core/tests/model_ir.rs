mod common;

use std::collections::BTreeSet;

use hvsim_core::ir::*;
use hvsim_core::verify::{random_graph, GraphGenOptions};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// MAC count by enumerating every (output, input-channel, tap) tuple.
fn counted_macs(desc: &LayerDesc, input: TensorShape) -> u64 {
    let o = common::out_shape(input, desc);
    let cin_g = desc.in_channels / desc.groups;
    let mut n = 0u64;
    for _oc in 0..o.channels {
        for _px in 0..o.height * o.width {
            for _ic in 0..cin_g {
                for _tap in 0..desc.kernel * desc.kernel {
                    n += 1;
                }
            }
        }
    }
    n
}

fn one(desc: LayerDesc, input: TensorShape) -> NetworkGraph {
    NetworkGraph::build(input, vec![(desc, Stage::S1, None)]).unwrap()
}

#[test]
fn single_pw_config() {
    let g = load_network(
        r#"{"input_shape": [1, 8, 4, 4], "layers": [{"kind": "PWConv", "out_channels": 16}], "stage_tags": ["S1"]}"#,
    )
    .unwrap();
    assert_eq!(g.len(), 1);
    assert_eq!(g.output_shape(), TensorShape::new(1, 16, 4, 4));
}

#[test]
fn stride_two_dw_shape() {
    let g = one(LayerDesc::dw(8, 3, 2), TensorShape::new(1, 8, 8, 8));
    assert_eq!(g.output_shape(), TensorShape::new(1, 8, 4, 4));
}

#[test]
fn pw_with_kernel_three_is_rejected() {
    let e = load_network(
        r#"{"input_shape": [1, 8, 4, 4], "layers": [{"kind": "PWConv", "kernel": 3, "out_channels": 8}], "stage_tags": ["S1"]}"#,
    )
    .unwrap_err();
    assert!(e.to_string().contains("PWConv requires kernel=1"), "{e}");
}

#[test]
fn malformed_config_reports_position() {
    let e = load_network("{\n  \"input_shape\": [1, 8, 4, 4],\n  \"layers\": [ {\"kind\": }\n}").unwrap_err();
    assert!(matches!(e, hvsim_core::Error::Parse { line: 3, .. }), "{e}");
}

#[test]
fn channel_mismatch_names_both_layers() {
    let e = load_network(
        r#"{"input_shape": [1, 8, 4, 4], "layers": [
            {"kind": "PWConv", "name": "a", "out_channels": 16},
            {"kind": "PWConv", "name": "b", "in_channels": 12, "out_channels": 8}],
            "stage_tags": ["S1", "S1"]}"#,
    )
    .unwrap_err();
    let msg = e.to_string();
    assert!(msg.contains("(a)") && msg.contains("(b)"), "{msg}");
}

#[test]
fn b1_structure() {
    let g = build_efficientvit_b1(TensorShape::new(1, 3, 224, 224)).unwrap();
    let first = &g.layer(0).desc;
    assert_eq!(first.kind, LayerKind::GenericConv);
    assert_eq!(first.in_channels, 3);
    assert_eq!(first.stride, 2);
    let tags: BTreeSet<Stage> = g.stage_tags().iter().copied().collect();
    assert_eq!(tags, Stage::ALL.into_iter().collect());
    assert!(validate_graph(&g).is_ok());
    assert!(g.layers().iter().any(|l| l.desc.kind == LayerKind::MsaBlock));
}

#[test]
fn b1_rejects_indivisible_resolution() {
    assert!(matches!(
        build_efficientvit_b1(TensorShape::new(1, 3, 224, 223)),
        Err(hvsim_core::Error::Resolution { .. })
    ));
}

#[test]
fn validation_collects_errors() {
    let mut bad = LayerDesc::dw(8, 3, 1);
    bad.groups = 4;
    let g = NetworkGraph::from_parts_unchecked(
        TensorShape::new(1, 8, 4, 4),
        vec![LayerNode {
            desc: bad,
            input: TensorShape::new(1, 8, 4, 4),
            output: TensorShape::new(1, 8, 4, 4),
        }],
        vec![Stage::S1],
        vec![],
    );
    assert_eq!(validate_graph(&g).unwrap_err().len(), 1);

    let pw = LayerDesc::pw(8, 16);
    let add = LayerDesc::residual_add(16);
    let g = NetworkGraph::from_parts_unchecked(
        TensorShape::new(1, 8, 4, 4),
        vec![
            LayerNode {
                desc: pw,
                input: TensorShape::new(1, 8, 4, 4),
                output: TensorShape::new(1, 16, 4, 4),
            },
            LayerNode {
                desc: add,
                input: TensorShape::new(1, 16, 4, 4),
                output: TensorShape::new(1, 16, 4, 4),
            },
        ],
        vec![Stage::S1, Stage::S1],
        vec![(0, 1)],
    );
    assert_eq!(validate_graph(&g).unwrap_err().len(), 1);
}

#[test]
fn mac_closed_forms() {
    assert_eq!(layer_macs(&LayerDesc::pw(8, 8), TensorShape::new(1, 8, 4, 4)), 1024);
    assert_eq!(layer_macs(&LayerDesc::dw(8, 3, 1), TensorShape::new(1, 8, 8, 8)), 4608);
    assert_eq!(layer_macs(&LayerDesc::matmul(8, 8), TensorShape::new(1, 8, 1, 16)), 1024);
}

#[test]
fn dram_byte_counts() {
    let pw = LayerDesc::pw(8, 8);
    let s = TensorShape::new(1, 8, 4, 4);
    assert_eq!(layer_dram_bytes(&pw, s, false, false), 320);
    assert_eq!(layer_dram_bytes(&pw, s, false, true), 192);
    let dw = LayerDesc::dw(8, 3, 1);
    // Fused into the following PW: the DW output is never counted.
    assert_eq!(layer_dram_bytes(&dw, s, false, true), 72 + 128);
}

#[test]
fn round_trip_preserves_stage_macs() {
    let g = build_efficientvit_b1(TensorShape::new(1, 3, 224, 224)).unwrap();
    let back = load_network(&save_network(&g)).unwrap();
    assert_eq!(back, g);
    assert_eq!(back.stage_macs(), g.stage_macs());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn macs_match_enumeration(
        kind in 0usize..4, k in prop::sample::select(vec![1usize, 3, 5, 7]), s in 1usize..=2,
        cin in 1usize..12, cout in 1usize..12, h in 7usize..16, w in 7usize..16,
    ) {
        let desc = match kind {
            0 => LayerDesc::dw(cin, if k == 1 { 3 } else { k }, s),
            1 => LayerDesc::pw(cin, cout),
            2 => LayerDesc::matmul(cin, cout),
            _ => LayerDesc::generic_conv(cin, cout, k, s, k / 2),
        };
        let input = TensorShape::new(1, desc.in_channels, h, w);
        prop_assert_eq!(layer_macs(&desc, input), counted_macs(&desc, input));
    }

    #[test]
    fn msa_macs_are_the_sum_of_parts(
        c in 2usize..16, heads in 1usize..3, dim in prop::sample::select(vec![2usize, 4, 8]),
        big in prop::sample::select(vec![vec![1usize], vec![1, 3], vec![1, 5], vec![5]]), h in 2usize..8,
    ) {
        let desc = LayerDesc::msa(c, c, heads, dim, big.clone());
        let input = TensorShape::new(1, c, h, h);
        let n = (h * h) as u64;
        let qkv = input.with_channels(desc.qkv_channels());
        let mut expect = counted_macs(&desc.qkv_desc(), input);
        for &k in &big {
            if k > 1 {
                expect += counted_macs(&desc.aggregation_dw_desc(k), qkv);
                expect += counted_macs(&desc.aggregation_pw_desc(k), qkv);
            }
        }
        let d = dim as u64;
        expect += (big.len() * heads) as u64 * (2 * n * d * d + n * d);
        expect += counted_macs(&desc.proj_desc(), input.with_channels(desc.attention_channels()));
        prop_assert_eq!(layer_macs(&desc, input), expect);
    }

    #[test]
    fn random_graphs_round_trip(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = random_graph(&mut rng, GraphGenOptions::default()).unwrap();
        prop_assert!(validate_graph(&g).is_ok());
        let back = load_network(&save_network(&g)).unwrap();
        prop_assert_eq!(back.stage_macs(), g.stage_macs());
        prop_assert_eq!(back, g);
    }
}
