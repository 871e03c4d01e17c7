mod common;

use common::{masked_attention, max_abs_diff, randn, tile_of};
use proptest::prelude::*;
use unifiq_core::attention::{
    blocked_attention, cone_partition, ha_layer, partition_order, spatial_partition, spatial_unpartition,
    AttentionParams, HaConfig, HaStack, Role, Sda, SdaDense, SegmentEmbedding, SDA_PAIRS,
};
use unifiq_core::encoder::TokenMap;
use unifiq_core::nn::{zero_params, ParamSet};
use unifiq_core::weights::WeightStore;
use unifiq_tensor::{finite_diff_check, GradCheckOptions, Tape, Tensor, Var};

const C: usize = 16;

struct Setup {
    ps: ParamSet,
    store: WeightStore,
}

impl Setup {
    fn weight(&self, name: &str) -> Tensor<f64> {
        self.store.get(name).unwrap().cast()
    }
}

fn attention_setup(seed: u64) -> (Setup, AttentionParams) {
    let mut ps = ParamSet::new();
    let params = AttentionParams::declare(&mut ps, "att", C);
    let store = ps.init(seed);
    (Setup { ps, store }, params)
}

fn token_map(tape: &mut Tape<f64>, t: &Tensor<f64>, side: usize) -> TokenMap {
    let v = tape.constant(t.clone());
    TokenMap::new(tape, v, side, side).unwrap()
}

#[test]
fn blocked_attention_matches_masked_full_attention() {
    let side = 16;
    for seed in 0..20 {
        let (s, params) = attention_setup(seed);
        let (wq, wk, wv) = (s.weight("att.wq"), s.weight("att.wk"), s.weight("att.wv"));
        let xq = randn(1000 + seed, &[2, side * side, C]);
        let xkv = randn(2000 + seed, &[2, side * side, C]);
        for r in [1, 2, 4] {
            let mut tape = Tape::<f64>::new();
            let p = s.ps.bind(&mut tape, &s.store).unwrap();
            let (q, kv) = (token_map(&mut tape, &xq, side), token_map(&mut tape, &xkv, side));
            let got = blocked_attention(&mut tape, &p, q, kv, r, &params).unwrap();
            let want = masked_attention(&xq, &xkv, &wq, &wk, &wv, |i, j| {
                tile_of(i, side, r) == tile_of(j, side, r)
            });
            let err = max_abs_diff(tape.value(got.var).data(), want.data());
            assert!(err < 1e-5, "seed {seed} r {r}: {err}");
        }
    }
}

#[test]
fn scale_one_is_global_attention() {
    let (s, params) = attention_setup(3);
    let (wq, wk, wv) = (s.weight("att.wq"), s.weight("att.wk"), s.weight("att.wv"));
    let x = randn(8, &[1, 64, C]);
    let mut tape = Tape::<f64>::new();
    let p = s.ps.bind(&mut tape, &s.store).unwrap();
    let xm = token_map(&mut tape, &x, 8);
    let got = blocked_attention(&mut tape, &p, xm, xm, 1, &params).unwrap();
    let want = masked_attention(&x, &x, &wq, &wk, &wv, |_, _| true);
    assert!(max_abs_diff(tape.value(got.var).data(), want.data()) < 1e-6);

    // The layer adds its MLP of that same attention output.
    let layer = ha_layer(&mut tape, &p, xm, xm, 1, &params).unwrap();
    let att = tape.constant(want);
    let m = params.mlp.forward(&mut tape, &p, att).unwrap();
    let expected = tape.add(xm.var, m).unwrap();
    let err = tape.value(layer.var).max_abs_diff(tape.value(expected)).unwrap();
    assert!(err < 1e-6, "{err}");
}

#[test]
fn single_token_returns_projected_value() {
    let (s, params) = attention_setup(5);
    let x = randn(1, &[1, 1, C]);
    let mut tape = Tape::<f64>::new();
    let p = s.ps.bind(&mut tape, &s.store).unwrap();
    let xm = token_map(&mut tape, &x, 1);
    let got = blocked_attention(&mut tape, &p, xm, xm, 1, &params).unwrap();
    let v = tape.matmul(xm.var, p[params.wv.index()]).unwrap();
    assert!(tape.value(got.var).max_abs_diff(tape.value(v)).unwrap() < 1e-12);
}

#[test]
fn attention_rows_sum_to_one_per_tile() {
    let (s, params) = attention_setup(9);
    let x = randn(4, &[1, 256, C]);
    for r in [1, 2, 4] {
        let mut tape = Tape::<f64>::new();
        let p = s.ps.bind(&mut tape, &s.store).unwrap();
        let xm = token_map(&mut tape, &x, 16);
        let q = tape.matmul(xm.var, p[params.wq.index()]).unwrap();
        let k = tape.matmul(xm.var, p[params.wk.index()]).unwrap();
        let q = spatial_partition(&mut tape, xm.with(q), r).unwrap();
        let k = spatial_partition(&mut tape, xm.with(k), r).unwrap();
        let logits = tape.matmul_t(q, k).unwrap();
        let m = tape.softmax_rows(logits, 4.0).unwrap();
        let w = tape.value(m);
        let row = 256 / (r * r);
        assert_eq!(w.shape(), &[1, r * r, row, row]);
        for chunk in w.data().chunks(row) {
            assert!((chunk.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
    }
}

#[test]
fn partition_example_and_errors() {
    // 4×4 grid, r = 2: token 5 sits in block 0 at local index 3.
    let order = partition_order(4, 4, 2);
    assert_eq!(order.iter().position(|&t| t == 5), Some(3));
    let mut tape = Tape::<f64>::new();
    let x = token_map(&mut tape, &randn(0, &[1, 16, 2]), 4);
    assert!(spatial_partition(&mut tape, x, 3).is_err());
    let x = token_map(&mut tape, &randn(0, &[1, 36, C]), 6);
    let (s, params) = attention_setup(0);
    let p = s.ps.bind(&mut tape, &s.store).unwrap();
    assert!(blocked_attention(&mut tape, &p, x, x, 4, &params).is_err());
}

proptest! {
    #[test]
    fn partition_round_trips(seed in any::<u64>(), r_pow in 0u32..3, side_mult in 1usize..3) {
        let r = 1usize << r_pow;
        let side = r * side_mult * 2;
        let x = randn(seed, &[2, side * side, 3]);
        let mut tape = Tape::<f64>::new();
        let xm = token_map(&mut tape, &x, side);
        let parts = spatial_partition(&mut tape, xm, r).unwrap();
        prop_assert_eq!(tape.shape(parts), &[2, r * r, side * side / (r * r), 3][..]);
        let back = spatial_unpartition(&mut tape, parts, side, side, r).unwrap();
        prop_assert!(tape.value(back.var).bit_eq(&x));

        let order = partition_order(side, side, r);
        let mut seen = order.clone();
        seen.sort_unstable();
        prop_assert_eq!(seen, (0..side * side).collect::<Vec<_>>());
        let per_tile = side * side / (r * r);
        for (slot, &t) in order.iter().enumerate() {
            prop_assert_eq!(slot / per_tile, tile_of(t, side, r));
        }
    }
}

#[test]
fn ha_layer_gradients_match_finite_differences() {
    let (s, params) = attention_setup(11);
    let mut inputs = s.ps.to_f64(&s.store).unwrap();
    inputs.push(randn(21, &[1, 16, C]));
    inputs.push(randn(22, &[1, 16, C]));
    let n = s.ps.len();
    let report = finite_diff_check(
        |tape: &mut Tape<f64>, v: &[Var]| {
            let q = TokenMap::new(tape, v[n], 4, 4)?;
            let kv = TokenMap::new(tape, v[n + 1], 4, 4)?;
            let out = ha_layer(tape, &v[..n], q, kv, 2, &params)?;
            let sq = tape.mul(out.var, out.var)?;
            Ok::<_, unifiq_core::Error>(tape.sum_all(sq))
        },
        &inputs,
        &GradCheckOptions::new(1e-6, 1e-3),
    )
    .unwrap();
    assert!(report.passed(), "max rel error {}", report.max_rel_error());
}

fn stack_setup(cfg: &HaConfig, seed: u64) -> (Setup, HaStack) {
    let mut ps = ParamSet::new();
    let stack = HaStack::declare(&mut ps, "ha", C, cfg);
    let store = ps.init(seed);
    (Setup { ps, store }, stack)
}

#[test]
fn zeroed_mlp_outputs_make_ha_an_identity() {
    for scales in [vec![1], vec![1, 2]] {
        let cfg = HaConfig {
            scales,
            layers_per_scale: 1,
        };
        let (mut s, stack) = stack_setup(&cfg, 2);
        zero_params(&s.ps, &mut s.store, stack.output_params());
        let x = randn(3, &[2, 64, C]);
        let other = randn(4, &[2, 64, C]);
        let mut tape = Tape::<f64>::new();
        let p = s.ps.bind(&mut tape, &s.store).unwrap();
        let (xm, om) = (token_map(&mut tape, &x, 8), token_map(&mut tape, &other, 8));
        let out = stack.forward_self(&mut tape, &p, xm).unwrap();
        assert!(tape.value(out.var).bit_eq(&x));
        let out = stack.forward_cross(&mut tape, &p, om, xm).unwrap();
        assert!(tape.value(out.var).bit_eq(&other));
    }
}

#[test]
fn stack_parameter_audit() {
    let (s, stack) = stack_setup(&HaConfig::default(), 0);
    assert_eq!(stack.layers.len(), 2);
    assert_eq!(stack.layers.iter().map(|(r, _)| *r).collect::<Vec<_>>(), vec![1, 2]);
    let per_layer = 3 * C * C + (C * 2 * C + 2 * C) + (2 * C * C + C);
    assert_eq!(s.ps.num_params(), 2 * per_layer);
    assert_eq!(s.ps.len(), 2 * 7);
    assert!(s
        .ps
        .specs()
        .iter()
        .all(|p| p.name.starts_with("ha.layer0.") || p.name.starts_with("ha.layer1.")));

    let deep = HaConfig {
        scales: vec![1, 2, 4],
        layers_per_scale: 2,
    };
    let (s, stack) = stack_setup(&deep, 0);
    assert_eq!(stack.layers.len(), 6);
    assert_eq!(s.ps.num_params(), 6 * per_layer);
}

#[test]
fn scale_order_changes_the_output() {
    let forward = |scales: Vec<usize>| {
        let cfg = HaConfig {
            scales,
            layers_per_scale: 1,
        };
        let (s, stack) = stack_setup(&cfg, 42);
        let x = randn(43, &[1, 64, C]);
        let mut tape = Tape::<f64>::new();
        let p = s.ps.bind(&mut tape, &s.store).unwrap();
        let xm = token_map(&mut tape, &x, 8);
        let out = stack.forward_self(&mut tape, &p, xm).unwrap();
        tape.value(out.var).clone()
    };
    let (a, b) = (forward(vec![1, 2]), forward(vec![2, 1]));
    assert!(a.max_abs_diff(&b).unwrap() > 1e-3);
}

#[test]
fn cross_stack_with_equal_streams_is_the_self_stack() {
    let (s, stack) = stack_setup(&HaConfig::default(), 6);
    let x = randn(7, &[2, 64, C]);
    let mut tape = Tape::<f64>::new();
    let p = s.ps.bind(&mut tape, &s.store).unwrap();
    let a = token_map(&mut tape, &x, 8);
    let b = token_map(&mut tape, &x, 8);
    let nr = stack.forward_self(&mut tape, &p, a).unwrap();
    let fr = stack.forward_cross(&mut tape, &p, a, b).unwrap();
    assert!(tape.value(nr.var).bit_eq(tape.value(fr.var)));
}

#[test]
fn ha_stack_gradients_match_finite_differences() {
    let (s, stack) = stack_setup(&HaConfig::default(), 13);
    let mut inputs = s.ps.to_f64(&s.store).unwrap();
    inputs.push(randn(31, &[1, 16, C]));
    inputs.push(randn(32, &[1, 16, C]));
    let n = s.ps.len();
    let report = finite_diff_check(
        |tape: &mut Tape<f64>, v: &[Var]| {
            let q = TokenMap::new(tape, v[n], 4, 4)?;
            let kv = TokenMap::new(tape, v[n + 1], 4, 4)?;
            let out = stack.forward_cross(tape, &v[..n], q, kv)?;
            let sq = tape.mul(out.var, out.var)?;
            Ok::<_, unifiq_core::Error>(tape.sum_all(sq))
        },
        &inputs,
        &GradCheckOptions::new(1e-6, 1e-3),
    )
    .unwrap();
    assert!(report.passed(), "max rel error {}", report.max_rel_error());
}

#[test]
fn segment_embedding_tags_roles() {
    let mut ps = ParamSet::new();
    let emb = SegmentEmbedding::declare(&mut ps, "embed", C);
    let store = ps.init(1);
    let x = randn(2, &[1, 4, C]);
    let mut tape = Tape::<f64>::new();
    let p = ps.bind(&mut tape, &store).unwrap();
    let xm = token_map(&mut tape, &x, 2);
    let d = emb.add(&mut tape, &p, xm, Role::Distorted).unwrap();
    let r = emb.add(&mut tape, &p, xm, Role::Reference).unwrap();
    let (dv, rv) = (tape.value(d.var).clone(), tape.value(r.var).clone());
    let e0: Tensor<f64> = store.get("embed.e0").unwrap().cast();
    for t in 0..4 {
        for ch in 0..C {
            assert_eq!(dv.data()[t * C + ch], x.data()[t * C + ch] + e0.data()[ch]);
        }
    }
    assert!(!dv.bit_eq(&rv));

    let narrow = token_map(&mut tape, &randn(2, &[1, 4, 3]), 2);
    assert!(emb.add(&mut tape, &p, narrow, Role::Distorted).is_err());
}

#[test]
fn cone_partitions_cover_every_token_once() {
    let sides = [16, 8, 4, 2];
    for (i, &deep) in sides.iter().enumerate() {
        for &shallow in &sides[..i] {
            let cp = cone_partition(shallow, deep, 2).unwrap();
            assert_eq!(cp.num_cones(), 4);
            let mut seen_s = vec![0; shallow * shallow];
            let mut seen_d = vec![0; deep * deep];
            for cone in 0..4 {
                let (s, d) = cp.members(cone);
                assert_eq!(s.len(), (shallow / 2).pow(2));
                assert_eq!(d.len(), (deep / 2).pow(2));
                s.iter().for_each(|&t| seen_s[t] += 1);
                d.iter().for_each(|&t| seen_d[t] += 1);
                // Spatial alignment: token centres fall in the same quadrant.
                for &t in &s {
                    let (y, x) = ((t / shallow) as f64 + 0.5, (t % shallow) as f64 + 0.5);
                    let quadrant = usize::from(y >= shallow as f64 / 2.0) * 2 + usize::from(x >= shallow as f64 / 2.0);
                    assert_eq!(quadrant, cone);
                }
                for &t in &d {
                    let (y, x) = ((t / deep) as f64 + 0.5, (t % deep) as f64 + 0.5);
                    let quadrant = usize::from(y >= deep as f64 / 2.0) * 2 + usize::from(x >= deep as f64 / 2.0);
                    assert_eq!(quadrant, cone);
                }
            }
            assert!(seen_s.iter().chain(&seen_d).all(|&k| k == 1));
        }
    }
    let cp = cone_partition(16, 4, 2).unwrap();
    assert_eq!(cp.members(0).0.len(), 64);
    assert_eq!(cp.members(0).1.len(), 4);
    assert!(cone_partition(16, 4, 3).is_err());
    assert!(cone_partition(16, 4, 0).is_err());
}

fn sda_setup(seed: u64) -> (Setup, Sda) {
    let mut ps = ParamSet::new();
    let sda = Sda::declare(&mut ps, "sda", C, 2);
    let store = ps.init(seed);
    (Setup { ps, store }, sda)
}

#[test]
fn sda_matches_masked_cross_attention_for_every_stage_pair() {
    let sides = [16, 8, 4, 2];
    for (k, &(i, j)) in SDA_PAIRS.iter().enumerate() {
        let (shallow, deep) = (sides[j - 1], sides[i - 1]);
        let (s, sda) = sda_setup(50 + k as u64);
        let (wq, wk, wv) = (s.weight("sda.wq"), s.weight("sda.wk"), s.weight("sda.wv"));
        let xs = randn(60 + k as u64, &[2, shallow * shallow, C]);
        let xd = randn(70 + k as u64, &[2, deep * deep, C]);
        let mut tape = Tape::<f64>::new();
        let p = s.ps.bind(&mut tape, &s.store).unwrap();
        let (sm, dm) = (token_map(&mut tape, &xs, shallow), token_map(&mut tape, &xd, deep));
        let got = sda.attend(&mut tape, &p, sm, dm).unwrap();
        assert_eq!((got.h, got.w), (shallow, shallow));
        let want = masked_attention(&xs, &xd, &wq, &wk, &wv, |a, b| {
            tile_of(a, shallow, 2) == tile_of(b, deep, 2)
        });
        let err = max_abs_diff(tape.value(got.var).data(), want.data());
        assert!(err < 1e-5, "C{i}{j}: {err}");

        let out = sda.forward(&mut tape, &p, sm, dm).unwrap();
        let att = tape.constant(want);
        let m = sda.params.mlp.forward(&mut tape, &p, att).unwrap();
        let expected = tape.add(sm.var, m).unwrap();
        assert!(tape.value(out.var).max_abs_diff(tape.value(expected)).unwrap() < 1e-5);
    }
}

#[test]
fn sda_with_one_key_per_cone_broadcasts_its_value() {
    let (s, sda) = sda_setup(3);
    let xs = randn(1, &[1, 16, C]);
    let xd = randn(2, &[1, 4, C]);
    let mut tape = Tape::<f64>::new();
    let p = s.ps.bind(&mut tape, &s.store).unwrap();
    let (sm, dm) = (token_map(&mut tape, &xs, 4), token_map(&mut tape, &xd, 2));
    let got = sda.attend(&mut tape, &p, sm, dm).unwrap();
    let v = tape.matmul(dm.var, p[sda.params.wv.index()]).unwrap();
    let (got, v) = (tape.value(got.var), tape.value(v));
    for t in 0..16 {
        let cone = tile_of(t, 4, 2);
        let diff = max_abs_diff(&got.data()[t * C..(t + 1) * C], &v.data()[cone * C..(cone + 1) * C]);
        assert!(diff < 1e-12);
    }
}

#[test]
fn sda_rejects_bad_grids() {
    let (s, sda) = sda_setup(3);
    let mut tape = Tape::<f64>::new();
    let p = s.ps.bind(&mut tape, &s.store).unwrap();
    let a = token_map(&mut tape, &randn(1, &[1, 16, C]), 4);
    let b = token_map(&mut tape, &randn(1, &[1, 16, C]), 4);
    assert!(sda.forward(&mut tape, &p, a, b).is_err());
    let small = token_map(&mut tape, &randn(1, &[1, 4, C]), 2);
    assert!(sda.forward(&mut tape, &p, small, a).is_err());
}

fn pyramid(tape: &mut Tape<f64>, seed: u64, batch: usize) -> [TokenMap; 4] {
    [16, 8, 4, 2].map(|side| {
        let x = randn(seed + side as u64, &[batch, side * side, C]);
        token_map(tape, &x, side)
    })
}

#[test]
fn sda_dense_shapes_order_and_identity() {
    let mut ps = ParamSet::new();
    let dense = SdaDense::declare(&mut ps, "sda", C, 2);
    let mut store = ps.init(4);
    assert_eq!(dense.blocks.len(), 6);
    let names: Vec<&str> = ps
        .specs()
        .iter()
        .map(|p| p.name.as_str())
        .filter(|n| n.ends_with(".wq"))
        .collect();
    assert_eq!(
        names,
        [
            "sda.c21.wq",
            "sda.c31.wq",
            "sda.c41.wq",
            "sda.c32.wq",
            "sda.c42.wq",
            "sda.c43.wq"
        ]
    );
    assert_eq!(ps.num_params(), 6 * (3 * C * C + C * 2 * C + 2 * C + 2 * C * C + C));

    let mut tape = Tape::<f64>::new();
    let p = ps.bind(&mut tape, &store).unwrap();
    let pyr = pyramid(&mut tape, 100, 2);
    let out = dense.forward(&mut tape, &p, &pyr).unwrap();
    let sides: Vec<usize> = out.iter().map(|m| m.h).collect();
    assert_eq!(sides, [16, 16, 16, 8, 8, 4]);

    zero_params(&ps, &mut store, dense.output_params());
    let mut tape = Tape::<f64>::new();
    let p = ps.bind(&mut tape, &store).unwrap();
    let pyr = pyramid(&mut tape, 100, 2);
    let out = dense.forward(&mut tape, &p, &pyr).unwrap();
    for (m, &(_, j)) in out.iter().zip(&SDA_PAIRS) {
        assert!(tape.value(m.var).bit_eq(tape.value(pyr[j - 1].var)));
    }
}

#[test]
fn sda_dense_gradients_match_finite_differences() {
    let mut ps = ParamSet::new();
    let dense = SdaDense::declare(&mut ps, "sda", C, 2);
    let store = ps.init(8);
    let mut inputs = ps.to_f64(&store).unwrap();
    for (k, side) in [16usize, 8, 4, 2].into_iter().enumerate() {
        inputs.push(randn(200 + k as u64, &[1, side * side, C]));
    }
    let n = ps.len();
    let report = finite_diff_check(
        |tape: &mut Tape<f64>, v: &[Var]| {
            let mut maps = Vec::new();
            for (k, side) in [16usize, 8, 4, 2].into_iter().enumerate() {
                maps.push(TokenMap::new(tape, v[n + k], side, side)?);
            }
            let pyr: [TokenMap; 4] = maps.try_into().unwrap();
            let outs = dense.forward(tape, &v[..n], &pyr)?;
            let mut total: Option<Var> = None;
            for m in outs {
                let sq = tape.mul(m.var, m.var)?;
                let s = tape.sum_all(sq);
                total = Some(match total {
                    Some(t) => tape.add(t, s)?,
                    None => s,
                });
            }
            Ok::<_, unifiq_core::Error>(total.unwrap())
        },
        &inputs,
        &GradCheckOptions::new(1e-6, 1e-3).sampled(6, 1),
    )
    .unwrap();
    assert!(report.passed(), "max rel error {}", report.max_rel_error());
}
