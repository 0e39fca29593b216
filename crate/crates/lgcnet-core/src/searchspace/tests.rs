use alloc::vec;
use alloc::vec::Vec;

use super::*;
use crate::ggm::{self, GgmMode, GgmWeights};
use crate::relax::ArchParams;
use crate::rng::{self, stream, Stream};
use crate::tensor::{ParamStore, Tape, Tensor, Var};

fn toy_topology() -> NetworkTopology {
    NetworkTopology {
        k: 3,
        initial_channels: 4,
        channel_multiplier: 2,
        reduction_indices: vec![1, 2],
        fusion_taps: Some([0, 1, 2]),
        fusion_channels: 6,
        num_classes: 4,
    }
}

fn backbone_topology(k: usize) -> NetworkTopology {
    NetworkTopology {
        k,
        initial_channels: 4,
        channel_multiplier: 1,
        reduction_indices: if k > 1 { vec![1] } else { vec![] },
        fusion_taps: None,
        fusion_channels: 8,
        num_classes: 3,
    }
}

fn rand_image(rng: &mut rng::Rng, h: usize, w: usize) -> Tensor {
    let data = (0..3 * h * w).map(|_| rng::uniform(rng, 0.0, 1.0)).collect();
    Tensor::new(vec![3, h, w], data).unwrap()
}

fn uniform_masks(tape: &mut Tape, net: &Supernet) -> MaskVars {
    let (p, q) = net.topology.pq();
    let cells = (0..net.topology.k)
        .map(|_| tape.constant(vec![p, q], vec![1.0 / q as f64; p * q]))
        .collect();
    let fusion = net
        .topology
        .fusion_widths()
        .iter()
        .map(|&w| tape.constant(vec![1, w], vec![1.0 / w as f64; w]))
        .collect();
    MaskVars { cells, fusion }
}

// ─── templates & topology ───────────────────────────────────────────────────

#[test]
fn cell_template_shape() {
    let t = CellTemplate::new(false);
    assert_eq!(t.p(), 5);
    assert_eq!(t.q(), 8);
    assert_eq!(t.edges, vec![(0, 2), (1, 2), (0, 3), (1, 3), (2, 3)]);
    for e in 0..5 {
        assert_eq!(t.edge_stride(e), 1);
    }
    let r = CellTemplate::new(true);
    assert_eq!(
        (0..5).map(|e| r.edge_stride(e)).collect::<Vec<_>>(),
        vec![2, 2, 2, 2, 1]
    );
}

#[test]
fn default_topology_valid_and_planned() {
    let t = NetworkTopology::default();
    t.validate().unwrap();
    let plans = t.cell_plans();
    assert_eq!(plans.len(), 14);
    assert_eq!(plans[0].out_stride, 4);
    assert_eq!(plans[1].out_stride, 8);
    assert_eq!(plans[7].out_stride, 8);
    assert_eq!(plans[8].out_stride, 16);
    assert_eq!(plans[13].out_stride, 16);
    assert_eq!(plans[0].channels, 8);
    assert_eq!(plans[1].channels, 16);
    assert_eq!(plans[8].channels, 32);
    assert!(plans[2].in0_strides);
    assert!(!plans[3].in0_strides);
}

#[test]
fn bad_topologies_rejected() {
    let mut t = NetworkTopology::default();
    t.fusion_taps = Some([1, 7, 13]); // cell 1 sits at stride 8, not 4
    assert!(t.validate().is_err());
    t = NetworkTopology::default();
    t.reduction_indices = vec![8, 1];
    assert!(t.validate().is_err());
    t = NetworkTopology::default();
    t.reduction_indices = vec![1, 99];
    assert!(t.validate().is_err());
    t = NetworkTopology::default();
    t.num_classes = 1;
    assert!(t.validate().is_err());
    t = backbone_topology(2);
    t.validate().unwrap();
}

#[test]
fn fusion_template_counts_and_up_edges() {
    let f = FusionTemplate::standard();
    assert_eq!(f.num_nodes, 9);
    assert_eq!(f.num_edges(), 13);
    let ups: Vec<usize> = f
        .edges
        .iter()
        .enumerate()
        .filter(|(_, e)| e.is_up)
        .map(|(i, _)| i)
        .collect();
    assert_eq!(ups, vec![4, 7, 8]);
    for (i, e) in f.edges.iter().enumerate() {
        let src = f.src_stride(i);
        let dst = f.node_strides[e.dst];
        if e.is_up {
            assert_eq!(src, 2 * dst, "edge {i}");
        } else {
            assert_eq!(src, dst, "edge {i}");
        }
        assert_eq!(e.candidates().len(), if e.is_up { 2 } else { 10 });
    }
    for &n in &f.out_nodes {
        assert_eq!(f.node_strides[n], 4);
    }
}

// ─── supernet construction & forward ────────────────────────────────────────

#[test]
fn build_supernet_default_has_14_cells_of_5x8() {
    let topo = NetworkTopology {
        num_classes: 4,
        initial_channels: 4,
        ..NetworkTopology::default()
    };
    let mut store = ParamStore::new();
    let mut rng = stream(1, Stream::NetInit);
    let net = Supernet::build(&topo, &mut store, &mut rng).unwrap();
    assert_eq!(net.cells.len(), 14);
    for cell in &net.cells {
        assert_eq!(cell.edges.len(), 5);
        for ops in &cell.edges {
            assert_eq!(ops.len(), 8);
        }
    }
    let fusion = net.fusion.as_ref().unwrap();
    assert_eq!(fusion.edges.len(), 13);
}

#[test]
fn reduction_cell_halves_extents() {
    let topo = backbone_topology(2);
    let mut store = ParamStore::new();
    let mut rng = stream(2, Stream::NetInit);
    let net = Supernet::build(&topo, &mut store, &mut rng).unwrap();
    let mut tape = Tape::new(&store, true);
    let img = rand_image(&mut rng, 32, 32);
    let input = tape.constant_from(&img);

    // walk manually to inspect cell output shapes
    let mut x = input;
    for s in &net.stem {
        x = s.apply(&mut tape, x).unwrap();
    }
    assert_eq!(tape.shape(x), &[4, 8, 8]); // stride 4
    let masks = uniform_masks(&mut tape, &net);
    let c0 = cell_forward(&mut tape, &net.cells[0], x, x, masks.cells[0]).unwrap();
    assert_eq!(tape.shape(c0), &[8, 8, 8]); // 2*c channels, stride kept
    let c1 = cell_forward(&mut tape, &net.cells[1], x, c0, masks.cells[1]).unwrap();
    assert_eq!(tape.shape(c1), &[8, 4, 4]); // reduction halves extents
}

#[test]
fn one_hot_skip_cell_adds_preprocessed_inputs() {
    let topo = backbone_topology(1);
    let mut store = ParamStore::new();
    let mut rng = stream(3, Stream::NetInit);
    let net = Supernet::build(&topo, &mut store, &mut rng).unwrap();
    let cell = &net.cells[0];
    let (p, q) = topo.pq();

    let mut tape = Tape::new(&store, true);
    let feat_data: Vec<f64> = (0..4 * 8 * 8).map(|_| rng::uniform(&mut rng, -1.0, 1.0)).collect();
    let feat = tape.constant(vec![4, 8, 8], feat_data);
    let mut z = vec![0.0; p * q];
    for e in 0..p {
        z[e * q + 1] = 1.0; // skip everywhere
    }
    let zv = tape.constant(vec![p, q], z);
    let out = cell_forward(&mut tape, cell, feat, feat, zv).unwrap();

    // oracle: x1 = pre0(feat) + pre1(feat); x2 = pre0 + pre1 + x1
    let i1 = cell.pre0.apply(&mut tape, feat).unwrap();
    let i2 = cell.pre1.apply(&mut tape, feat).unwrap();
    let x1: Vec<f64> = tape
        .value(i1)
        .iter()
        .zip(tape.value(i2).iter())
        .map(|(&a, &b)| a + b)
        .collect();
    let x2: Vec<f64> = x1
        .iter()
        .zip(tape.value(i1).iter().zip(tape.value(i2).iter()))
        .map(|(&x, (&a, &b))| a + b + x)
        .collect();
    let want: Vec<f64> = x1.iter().chain(x2.iter()).copied().collect();
    assert_eq!(tape.value(out), want.as_slice());
}

#[test]
fn one_hot_zero_cell_outputs_zeros() {
    let topo = backbone_topology(1);
    let mut store = ParamStore::new();
    let mut rng = stream(4, Stream::NetInit);
    let net = Supernet::build(&topo, &mut store, &mut rng).unwrap();
    let (p, q) = topo.pq();
    let mut tape = Tape::new(&store, true);
    let feat = tape.constant(vec![4, 8, 8], vec![0.3; 4 * 64]);
    let mut z = vec![0.0; p * q];
    for e in 0..p {
        z[e * q + 3] = 1.0; // zero everywhere
    }
    let zv = tape.constant(vec![p, q], z);
    let out = cell_forward(&mut tape, &net.cells[0], feat, feat, zv).unwrap();
    assert!(tape.value(out).iter().all(|&v| v == 0.0));
    assert_eq!(tape.shape(out), &[8, 8, 8]);
}

#[test]
fn uniform_mask_matches_brute_force_average_of_ops() {
    let topo = backbone_topology(1);
    let mut store = ParamStore::new();
    let mut rng = stream(5, Stream::NetInit);
    let net = Supernet::build(&topo, &mut store, &mut rng).unwrap();
    let cell = &net.cells[0];
    let (p, q) = topo.pq();

    let mut tape = Tape::new(&store, true);
    let feat_data: Vec<f64> = (0..4 * 4 * 4).map(|_| rng::uniform(&mut rng, -1.0, 1.0)).collect();
    let feat = tape.constant(vec![4, 4, 4], feat_data);
    let zv = tape.constant(vec![p, q], vec![1.0 / q as f64; p * q]);
    let out = cell_forward(&mut tape, cell, feat, feat, zv).unwrap();

    // oracle: explicit per-op sum, same tape so normalization sees the
    // same per-op inputs
    let i = [
        cell.pre0.apply(&mut tape, feat).unwrap(),
        cell.pre1.apply(&mut tape, feat).unwrap(),
    ];
    let mut node_vals: Vec<Vec<f64>> = vec![tape.value(i[0]).to_vec(), tape.value(i[1]).to_vec()];
    for node in 2..4usize {
        let mut acc = vec![0.0; 4 * 16];
        for (e, &(from, to)) in cell.template.edges.iter().enumerate() {
            if to != node {
                continue;
            }
            let src = tape.constant(vec![4, 4, 4], node_vals[from].clone());
            for op in &cell.edges[e] {
                if op.kind == crate::tensor::PrimitiveKind::Zero {
                    continue;
                }
                let y = op.apply(&mut tape, src).unwrap();
                for (a, &v) in acc.iter_mut().zip(tape.value(y).iter()) {
                    *a += v / q as f64;
                }
            }
        }
        node_vals.push(acc);
    }
    let want: Vec<f64> = node_vals[2].iter().chain(node_vals[3].iter()).copied().collect();
    let got = tape.value(out);
    for (g, w) in got.iter().zip(want.iter()) {
        assert!((g - w).abs() < 1e-12, "{g} vs {w}");
    }
}

#[test]
fn full_forward_shapes_and_fusion_output_stride() {
    let topo = toy_topology();
    let mut store = ParamStore::new();
    let mut rng = stream(6, Stream::NetInit);
    let net = Supernet::build(&topo, &mut store, &mut rng).unwrap();
    let mut tape = Tape::new(&store, true);
    let img = rand_image(&mut rng, 32, 64);
    let input = tape.constant_from(&img);
    let masks = uniform_masks(&mut tape, &net);
    let logits = net.forward(&mut tape, input, &masks).unwrap();
    assert_eq!(tape.shape(logits), &[4, 32, 64]);
    assert!(tape.all_finite());
}

#[test]
fn fusion_rejects_mismatched_tap_strides() {
    let topo = toy_topology();
    let mut store = ParamStore::new();
    let mut rng = stream(7, Stream::NetInit);
    let net = Supernet::build(&topo, &mut store, &mut rng).unwrap();
    let fusion = net.fusion.as_ref().unwrap();
    let mut tape = Tape::new(&store, true);
    let t4 = tape.zeros(vec![8, 8, 8]);
    let t8 = tape.zeros(vec![16, 4, 4]);
    let bad16 = tape.zeros(vec![32, 4, 4]); // same stride as t8
    let zf: Vec<Var> = net
        .topology
        .fusion_widths()
        .iter()
        .map(|&w| tape.constant(vec![1, w], vec![1.0 / w as f64; w]))
        .collect();
    assert!(fusion_forward(&mut tape, fusion, [t4, t8, bad16], &zf).is_err());
}

// ─── mixture collapse ───────────────────────────────────────────────────────

#[test]
fn one_hot_forward_equals_discrete_network_bitwise() {
    let topo = toy_topology();
    let mut store = ParamStore::new();
    let mut rng = stream(8, Stream::NetInit);
    let net = Supernet::build(&topo, &mut store, &mut rng).unwrap();
    let mut grng = stream(99, Stream::Sample);
    for trial in 0..5 {
        let g = random_genotype(&topo, &mut grng);
        let discrete = DiscreteNet::from_supernet(&net, &store, &g).unwrap();
        let img = rand_image(&mut rng, 32, 32);

        let mut tape = Tape::new(&store, true);
        let input = tape.constant_from(&img);
        let masks = net.one_hot_masks(&mut tape, &g);
        let super_out = net.forward(&mut tape, input, &masks).unwrap();
        let super_bits: Vec<u64> = tape.value(super_out).iter().map(|v| v.to_bits()).collect();

        let mut dtape = Tape::new(&discrete.store, true);
        let dinput = dtape.constant_from(&img);
        let disc_out = discrete.forward(&mut dtape, dinput).unwrap();
        let disc_bits: Vec<u64> = dtape.value(disc_out).iter().map(|v| v.to_bits()).collect();
        assert_eq!(super_bits, disc_bits, "trial {trial}");
    }
}

// ─── genotype serialization ─────────────────────────────────────────────────

#[test]
fn genotype_roundtrip_and_canonical_bytes() {
    let topo = toy_topology();
    let mut rng = stream(9, Stream::Sample);
    for _ in 0..50 {
        let g = random_genotype(&topo, &mut rng);
        let text = genotype_serialize(&g);
        assert!(text.ends_with('\n'));
        let parsed = genotype_parse(&text).unwrap();
        assert_eq!(parsed, g);
        assert_eq!(genotype_serialize(&parsed), text);
    }
}

#[test]
fn genotype_parse_errors_name_the_offender() {
    let topo = toy_topology();
    let mut rng = stream(10, Stream::Sample);
    let g = random_genotype(&topo, &mut rng);
    let text = genotype_serialize(&g);

    let bad = text.replacen(&BACKBONE_OPS[g.cells[1][2] as usize].name().to_string(), "warp_conv", 1);
    let err = genotype_parse(&bad).unwrap_err();
    let msg = alloc::format!("{err}");
    assert!(msg.contains("warp_conv"), "{msg}");

    let bad = text.replace("\"version\":\"1\"", "\"version\":\"999\"");
    assert!(genotype_parse(&bad).is_err());

    // a fusion op on a backbone edge is unknown there
    let bad = text.replacen(&BACKBONE_OPS[g.cells[0][0] as usize].name().to_string(), "global_pool_1", 1);
    assert!(genotype_parse(&bad).is_err());

    // unknown top-level key
    let bad = text.trim_end().trim_end_matches('}').to_string() + ",\"extra\":1}";
    assert!(genotype_parse(&bad).is_err());
}

#[test]
fn genotype_hash_is_stable_and_distinguishes() {
    let topo = toy_topology();
    let mut rng = stream(11, Stream::Sample);
    let a = random_genotype(&topo, &mut rng);
    let b = random_genotype(&topo, &mut rng);
    assert_eq!(genotype_hash(&a), genotype_hash(&a));
    assert_ne!(genotype_hash(&a), genotype_hash(&b));
    assert_eq!(genotype_hash(&a).len(), 16);
}

// ─── decode ─────────────────────────────────────────────────────────────────

#[test]
fn decode_uniform_init_gives_op0_everywhere() {
    let topo = toy_topology();
    let mut store = ParamStore::new();
    let (p, q) = topo.pq();
    let arch = ArchParams::alloc(&mut store, p, q, topo.k, &topo.fusion_widths(), false);
    let g = decode(&store, &arch, None, &topo, false).unwrap();
    for row in &g.cells {
        assert!(row.iter().all(|&op| op == 0));
    }
    assert!(g.fusion.iter().all(|&op| op == 0));
}

#[test]
fn decode_argmax_and_tie_break() {
    let topo = backbone_topology(2);
    let mut store = ParamStore::new();
    let (p, q) = topo.pq();
    let arch = ArchParams::alloc(&mut store, p, q, topo.k, &[], false);
    // cell 0 edge 0: make op 5 the argmax
    store.value_mut(arch.cells[0])[5] = 2.0;
    // cell 0 edge 1: exact tie between ops 2 and 6 -> 2 wins
    store.value_mut(arch.cells[0])[q + 2] = 1.5;
    store.value_mut(arch.cells[0])[q + 6] = 1.5;
    let g = decode(&store, &arch, None, &topo, false).unwrap();
    assert_eq!(g.cells[0][0], 5);
    assert_eq!(g.cells[0][1], 2);
}

#[test]
fn decode_revives_all_zero_cells() {
    let topo = backbone_topology(2);
    let mut store = ParamStore::new();
    let (p, q) = topo.pq();
    let arch = ArchParams::alloc(&mut store, p, q, topo.k, &[], false);
    for e in 0..p {
        store.value_mut(arch.cells[0])[e * q + 3] = 1.0 + e as f64 * 0.1; // zero dominates
    }
    let g = decode(&store, &arch, None, &topo, false).unwrap();
    // strongest zero edge (the last) became skip
    assert_eq!(g.cells[0][p - 1], 1);
    for e in 0..p - 1 {
        assert_eq!(g.cells[0][e], 3);
    }
}

#[test]
fn decode_with_ggm_matches_hand_computed_update() {
    // 2-cell toy: alpha'_1 = alpha_1 + gamma * Phi2(A Phi1(alpha_0) W + Phi1(alpha_0))
    let topo = backbone_topology(2);
    let (p, q) = topo.pq();
    let mut store = ParamStore::new();
    let arch = ArchParams::alloc(&mut store, p, q, topo.k, &[], false);
    let mut rng = stream(12, Stream::GgmInit);
    for id in &arch.cells {
        for v in store.value_mut(*id) {
            *v = rng::uniform(&mut rng, -1.0, 1.0);
        }
    }
    let mut weights = GgmWeights::alloc(&mut store, GgmMode::EdgeSimilarity, q, 6, 0.5, 1, &mut rng).unwrap();
    for id in [weights.phi2_w, weights.phi2_b] {
        for v in store.value_mut(id) {
            *v = rng::uniform(&mut rng, -0.4, 0.4);
        }
    }
    weights.gamma = 0.5;

    let g = decode(&store, &arch, Some(&weights), &topo, false).unwrap();

    // hand evaluation via the pure forms
    let a0 = arch.alpha_for(&store, 0, false);
    let a1 = arch.alpha_for(&store, 1, true);
    let mat = |id| Tensor::new(store.shape(id).to_vec(), store.value(id).to_vec()).unwrap();
    let adj = ggm::adjacency(&a1, &a0, &mat(weights.w1.unwrap()), &mat(weights.w2.unwrap())).unwrap();
    let phi1 = |x: &Tensor| -> Tensor {
        let w = mat(weights.phi1_w);
        let b = store.value(weights.phi1_b).to_vec();
        let (n, kk, m) = (x.shape()[0], x.shape()[1], w.shape()[1]);
        let mut out = vec![0.0; n * m];
        crate::tensor::kernels_matmul(x.data(), w.data(), n, kk, m, &mut out);
        for i in 0..n {
            for j in 0..m {
                out[i * m + j] += b[j];
            }
        }
        Tensor::new(vec![n, m], out).unwrap()
    };
    let x = phi1(&a0);
    let gprop = ggm::gcn_propagate(&x, &adj, &mat(weights.w_gcn[0])).unwrap();
    let w2m = mat(weights.phi2_w);
    let b2 = store.value(weights.phi2_b).to_vec();
    let mut upd = vec![0.0; p * q];
    crate::tensor::kernels_matmul(gprop.data(), w2m.data(), p, 6, q, &mut upd);
    for i in 0..p {
        for j in 0..q {
            upd[i * q + j] += b2[j];
        }
    }
    let mut expect_row = Vec::new();
    for e in 0..p {
        let mut best = 0;
        for m in 0..q {
            let v = a1.data()[e * q + m] + 0.5 * upd[e * q + m];
            let bv = a1.data()[e * q + best] + 0.5 * upd[e * q + best];
            if v > bv {
                best = m;
            }
        }
        expect_row.push(best as u8);
    }
    assert_eq!(g.cells[1], expect_row);
    // cell 0 has no predecessor: raw argmax
    let mut row0 = Vec::new();
    for e in 0..p {
        let mut best = 0;
        for m in 0..q {
            if a0.data()[e * q + m] > a0.data()[e * q + best] {
                best = m;
            }
        }
        row0.push(best as u8);
    }
    assert_eq!(g.cells[0], row0);
}

#[test]
fn genotype_schema_has_no_ggm_content() {
    let topo = toy_topology();
    let mut rng = stream(13, Stream::Sample);
    let g = random_genotype(&topo, &mut rng);
    let text = genotype_serialize(&g);
    for needle in ["ggm", "gcn", "gamma", "phi", "w1", "w2", "adjacency"] {
        assert!(!text.contains(needle), "genotype leaks {needle}: {text}");
    }
}

// ─── parameter counting ─────────────────────────────────────────────────────

fn all_op_genotype(topo: &NetworkTopology, op: u8) -> Genotype {
    let (p, _) = topo.pq();
    Genotype {
        version: GENOTYPE_VERSION.into(),
        topology: topo.clone(),
        cells: (0..topo.k).map(|_| vec![op; p]).collect(),
        fusion: topo.fusion_widths().iter().map(|_| 0).collect(),
    }
}

#[test]
fn count_params_structural_only_for_zero_and_skip() {
    // no reductions: skip carries no weights, zero is pruned
    let mut topo = backbone_topology(2);
    topo.reduction_indices = vec![];
    let zero_count = count_params(&all_op_genotype(&topo, 3)).unwrap();
    let skip_count = count_params(&all_op_genotype(&topo, 1)).unwrap();
    assert_eq!(zero_count, skip_count);

    // structural parameters: stem + per-cell preprocess + classifier
    let c = topo.initial_channels; // 4
    let stem = (3 * c * 9 + 2 * c) + (c * c * 9 + 2 * c) + (c * c * 9 + 2 * c);
    let pre_cell0 = 2 * (c * c + 2 * c); // both inputs are the stem (c channels)
    let pre_cell1 = (c * c + 2 * c) + (2 * c * c + 2 * c); // stem input + cell-0 output (2c)
    let head = 2 * c * topo.num_classes + topo.num_classes;
    assert_eq!(zero_count, stem + pre_cell0 + pre_cell1 + head);
}

#[test]
fn count_params_conv3x3_edge_delta() {
    let mut topo = backbone_topology(2);
    topo.reduction_indices = vec![];
    topo.initial_channels = 8;
    let base = all_op_genotype(&topo, 3);
    let mut with_conv = base.clone();
    with_conv.cells[0][4] = 2; // conv3x3 on the stride-1 inner edge, c_in = c_out = 8
    let delta = count_params(&with_conv).unwrap() - count_params(&base).unwrap();
    assert_eq!(delta, 8 * 8 * 9 + 16);
}

#[test]
fn count_params_scales_quadratically_with_width() {
    let mut topo = backbone_topology(2);
    topo.reduction_indices = vec![];
    let conv_delta = |ch: usize| -> usize {
        let mut t = topo.clone();
        t.initial_channels = ch;
        let base = all_op_genotype(&t, 3);
        let mut with_conv = base.clone();
        with_conv.cells[1][4] = 2;
        count_params(&with_conv).unwrap() - count_params(&base).unwrap()
    };
    let d8 = conv_delta(8);
    let d16 = conv_delta(16);
    // weight term scales 4x, the affine term 2x
    assert_eq!(d8, 8 * 8 * 9 + 16);
    assert_eq!(d16, 16 * 16 * 9 + 32);
}

#[test]
fn skip_on_reduction_edge_carries_conv_params() {
    let topo = backbone_topology(2); // reduction at cell 1
    let all_zero = count_params(&all_op_genotype(&topo, 3)).unwrap();
    let all_skip = count_params(&all_op_genotype(&topo, 1)).unwrap();
    // 4 reduction edges in cell 1 become 1x1 stride-2 convs
    let c = topo.initial_channels;
    assert_eq!(all_skip - all_zero, 4 * (c * c + 2 * c));
}
