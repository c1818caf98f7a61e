//! Autodiff against central finite differences on small models.

use lad_core::model::{EncoderConfig, LayeredModel};
use lad_core::nn::{grad_check, Graph, Group, NodeId, ParameterSet};
use lad_core::{Result, Tensor};

fn toy_config(layers: usize, hidden: usize) -> EncoderConfig {
    EncoderConfig {
        vocab_size: 12,
        max_sequence_length: 6,
        num_layers: layers,
        hidden_dim: hidden,
        num_heads: 2,
        ffn_dim: hidden,
        dropout_rate: 0.0,
        num_classes: 3,
        seed: 11,
    }
}

fn batch() -> Vec<Vec<u32>> {
    vec![vec![1, 4, 2, 7], vec![3, 3, 9], vec![11, 0, 5, 6, 8, 2], vec![10]]
}

/// Scales every weight so that gradients reach comfortably above round-off.
fn enlarge(model: &mut LayeredModel) {
    let ids: Vec<_> = model.params.ids().collect();
    for id in ids {
        let name = model.params.get(id).name.clone();
        if name.ends_with(".gain") {
            continue;
        }
        for (i, v) in model.params.value_mut(id).data_mut().iter_mut().enumerate() {
            *v = *v * 20.0 + 0.01 * ((i % 7) as f64 - 3.0);
        }
    }
}

fn summed_probe_loss<'a>(
    model: &'a LayeredModel,
    labels: &[usize],
) -> impl Fn(&ParameterSet, &mut Graph) -> Result<NodeId> + 'a {
    let labels = labels.to_vec();
    move |ps: &ParameterSet, g: &mut Graph| {
        let mut m = model.clone();
        m.params = ps.clone();
        let b = batch();
        let refs: Vec<&[u32]> = b.iter().map(Vec::as_slice).collect();
        let out = m.forward(g, &refs, None)?;
        let c = m.num_classes();
        let mut target = vec![0.0; labels.len() * c];
        for (i, &l) in labels.iter().enumerate() {
            target[i * c + l] = 1.0;
        }
        let t = g.input(Tensor::new(vec![labels.len(), c], target)?)?;
        let losses = out
            .logits
            .iter()
            .map(|&z| g.cross_entropy(z, t))
            .collect::<Result<Vec<_>>>()?;
        g.sum(&losses)
    }
}

#[test]
fn two_layer_encoder_matches_finite_differences() {
    let mut model = LayeredModel::new(toy_config(2, 16)).unwrap();
    enlarge(&mut model);
    let mut params = model.params.clone();
    let loss = summed_probe_loss(&model, &[0, 2, 1, 1]);
    let report = grad_check(&mut params, loss, 1e-5).unwrap();
    assert!(report.max_rel_error < 1e-4, "{report:?}");
    assert_eq!(report.checked, params.num_scalars());
}

#[test]
fn frozen_groups_are_excluded_from_the_check() {
    let mut model = LayeredModel::new(toy_config(2, 8)).unwrap();
    enlarge(&mut model);
    let mut params = model.params.clone();
    params.freeze_group(Group::Embeddings);
    params.freeze_group(Group::Backbone(1));
    let frozen: usize = params
        .iter()
        .filter(|(_, p)| !p.trainable)
        .map(|(_, p)| p.value.numel())
        .sum();
    let loss = summed_probe_loss(&model, &[1, 0, 2, 0]);
    let report = grad_check(&mut params, loss, 1e-5).unwrap();
    assert_eq!(report.checked, params.num_scalars() - frozen);
    assert!(report.max_rel_error < 1e-4, "{report:?}");
}

mod ops {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    /// Parameters `x`, `w` and `aux` plus a fixed random read-out matrix,
    /// so the loss `Σ op(..) ⊙ r` exercises every output entry.
    struct Case {
        params: ParameterSet,
        readout: Tensor,
    }

    fn case(seed: u64, shapes: &[(&str, &[usize])], out: &[usize]) -> Case {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParameterSet::new();
        for (name, shape) in shapes {
            params.add(*name, Group::MainClassifier, random(&mut rng, shape)).unwrap();
        }
        Case {
            params,
            readout: random(&mut rng, out),
        }
    }

    fn check<F>(c: Case, op: F)
    where
        F: Fn(&ParameterSet, &mut Graph) -> Result<NodeId>,
    {
        let Case { mut params, readout } = c;
        let loss = |ps: &ParameterSet, g: &mut Graph| {
            let y = op(ps, g)?;
            let r = g.input(readout.clone())?;
            let prod = g.mul(y, r)?;
            g.sum_all(prod)
        };
        let report = grad_check(&mut params, loss, 1e-5).unwrap();
        assert!(report.checked > 0);
        assert!(report.max_rel_error < 1e-4, "{report:?}");
    }

    fn p(g: &mut Graph, ps: &ParameterSet, name: &str) -> Result<NodeId> {
        g.param(ps, ps.id(name).unwrap())
    }

    #[test]
    fn matmul_and_bias() {
        let c = case(1, &[("x", &[3, 4]), ("w", &[4, 5]), ("b", &[5])], &[3, 5]);
        check(c, |ps, g| {
            let (x, w, b) = (p(g, ps, "x")?, p(g, ps, "w")?, p(g, ps, "b")?);
            g.linear(x, w, b)
        });
    }

    #[test]
    fn elementwise_add_mul_scale() {
        let c = case(2, &[("a", &[2, 3]), ("b", &[2, 3])], &[2, 3]);
        check(c, |ps, g| {
            let (a, b) = (p(g, ps, "a")?, p(g, ps, "b")?);
            let s = g.add(a, b)?;
            let m = g.mul(s, a)?;
            g.scale(m, -1.7)
        });
    }

    #[test]
    fn gelu() {
        let c = case(3, &[("x", &[4, 6])], &[4, 6]);
        check(c, |ps, g| {
            let x = p(g, ps, "x")?;
            let x = g.scale(x, 3.0)?;
            g.gelu(x)
        });
    }

    #[test]
    fn layer_norm_plain_and_affine() {
        let c = case(4, &[("x", &[3, 5])], &[3, 5]);
        check(c, |ps, g| {
            let x = p(g, ps, "x")?;
            g.layer_norm(x, None)
        });
        let c = case(5, &[("x", &[3, 5]), ("gain", &[5]), ("bias", &[5])], &[3, 5]);
        check(c, |ps, g| {
            let (x, gn, b) = (p(g, ps, "x")?, p(g, ps, "gain")?, p(g, ps, "bias")?);
            g.layer_norm(x, Some((gn, b)))
        });
    }

    #[test]
    fn attention_over_ragged_segments() {
        let c = case(6, &[("q", &[7, 4]), ("k", &[7, 4]), ("v", &[7, 4])], &[7, 4]);
        check(c, |ps, g| {
            let (q, k, v) = (p(g, ps, "q")?, p(g, ps, "k")?, p(g, ps, "v")?);
            let q = g.scale(q, 2.0)?;
            g.attention(q, k, v, 2, vec![(0, 3), (3, 1), (4, 3)])
        });
    }

    #[test]
    fn dropout_with_fixed_mask() {
        let c = case(7, &[("x", &[2, 4])], &[2, 4]);
        check(c, |ps, g| {
            let x = p(g, ps, "x")?;
            let keep = [true, false, true, true, false, true, true, true];
            g.dropout(x, &keep, 0.25)
        });
    }

    #[test]
    fn gather_with_repeats() {
        let c = case(8, &[("table", &[5, 3])], &[4, 3]);
        check(c, |ps, g| {
            let t = p(g, ps, "table")?;
            g.gather(t, vec![4, 0, 4, 2])
        });
    }

    #[test]
    fn softmax_rows() {
        let c = case(9, &[("x", &[3, 4])], &[3, 4]);
        check(c, |ps, g| {
            let x = p(g, ps, "x")?;
            g.softmax(x)
        });
    }

    #[test]
    fn cross_entropy_in_logits_and_soft_target() {
        let c = case(10, &[("z", &[3, 4]), ("t", &[3, 4])], &[]);
        check(c, |ps, g| {
            let z = p(g, ps, "z")?;
            let t = p(g, ps, "t")?;
            let t = g.softmax(t)?;
            g.cross_entropy(z, t)
        });
    }
}
