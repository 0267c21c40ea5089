use proptest::prelude::*;
use sumnet::loss::{wce_grad, wce_loss};
use sumnet::model::{build, forward, forward_traced, ForwardTrace};
use sumnet::ops::{concat_channels, conv2d, maxpool2x2, maxunpool2x2};
use sumnet::{Shape, SumNetConfig, Tensor};

fn tensor(shape: Shape, values: &[f64]) -> Tensor {
    Tensor::new(shape, values[..shape.numel()].to_vec()).unwrap()
}

fn values(n: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-2.0f64..2.0, n)
}

fn unit_values(n: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0.0f64..1.0, n)
}

fn axpy(a: f64, x: &Tensor, y: &Tensor) -> Tensor {
    Tensor::new(x.shape(), x.data().iter().zip(y.data()).map(|(u, v)| a * u + v).collect()).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn conv_is_linear_in_input(x in values(2 * 36), y in values(2 * 36), k in values(3 * 2 * 9), a in -3.0f64..3.0) {
        let s = Shape::new(1, 2, 6, 6);
        let (x, y) = (tensor(s, &x), tensor(s, &y));
        let k = tensor(Shape::new(3, 2, 3, 3), &k);
        let zero = Tensor::zeros(Shape::new(3, 1, 1, 1));
        let lhs = conv2d(&axpy(a, &x, &y), &k, &zero, 1).unwrap();
        let rhs = axpy(a, &conv2d(&x, &k, &zero, 1).unwrap(), &conv2d(&y, &k, &zero, 1).unwrap());
        prop_assert!(lhs.max_abs_diff(&rhs) < 1e-12);
    }

    #[test]
    fn unpooled_support_is_window_argmax(x in values(2 * 64)) {
        let x = tensor(Shape::new(1, 2, 8, 8), &x);
        let (pooled, idx) = maxpool2x2(&x).unwrap();
        let up = maxunpool2x2(&pooled, &idx, (8, 8)).unwrap();
        for c in 0..2 {
            for py in 0..4 {
                for px in 0..4 {
                    let window: Vec<(usize, usize)> = (0..4).map(|o| (2 * py + o / 2, 2 * px + o % 2)).collect();
                    let best = window.iter().map(|&(y, xx)| x.at(0, c, y, xx)).fold(f64::NEG_INFINITY, f64::max);
                    let nonzero: Vec<_> = window.iter().filter(|&&(y, xx)| up.at(0, c, y, xx) != 0.0).collect();
                    prop_assert!(nonzero.len() <= 1);
                    let kept = window.iter().map(|&(y, xx)| up.at(0, c, y, xx)).sum::<f64>();
                    prop_assert_eq!(kept, if best == 0.0 { 0.0 } else { best });
                }
            }
        }
    }

    #[test]
    fn concat_then_split_is_identity(a in values(2 * 16), b in values(3 * 16)) {
        let a = tensor(Shape::new(1, 2, 4, 4), &a);
        let b = tensor(Shape::new(1, 3, 4, 4), &b);
        let cat = concat_channels(&a, &b).unwrap();
        prop_assert!(cat.slice_channels(0..2).unwrap().bit_eq(&a));
        prop_assert!(cat.slice_channels(2..5).unwrap().bit_eq(&b));
    }

    #[test]
    fn scaling_weights_scales_loss(p in unit_values(16), y in prop::collection::vec(any::<bool>(), 16), w in values(16), c in 0.1f64..10.0) {
        let s = Shape::new(1, 1, 4, 4);
        let p = tensor(s, &p);
        let y = Tensor::new(s, y.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect()).unwrap();
        let w = Tensor::new(s, w.iter().map(|v| 1.0 + v.abs()).collect()).unwrap();
        let cw = w.map(|v| c * v).unwrap();
        let (l, lc) = (wce_loss(&p, &y, &w).unwrap(), wce_loss(&p, &y, &cw).unwrap());
        prop_assert!((lc - c * l).abs() <= 1e-12 * lc.abs().max(1.0));
        let (g, gc) = (wce_grad(&p, &y, &w).unwrap(), wce_grad(&p, &y, &cw).unwrap());
        prop_assert!(gc.max_abs_diff(&g.map(|v| c * v).unwrap()) <= 1e-9);
    }
}

fn narrow(h: usize, w: usize) -> SumNetConfig {
    SumNetConfig::vgg11(h, w).narrowed(16)
}

#[test]
fn forward_shapes_over_sizes() {
    for (h, w) in [(32, 32), (32, 96), (64, 32), (96, 64), (128, 160)] {
        let params = build(&narrow(h, w), 1).unwrap();
        for n in [1, 2] {
            let x = Tensor::from_fn(Shape::new(n, 1, h, w), |i, _, y, xx| ((i + y * 7 + xx * 3) % 11) as f64 / 10.0).unwrap();
            let out = forward(&params, &x).unwrap();
            assert_eq!(out.shape(), Shape::new(n, 1, h, w));
            assert!(out.data().iter().all(|&v| v > 0.0 && v < 1.0));
        }
    }
}

#[test]
fn wrong_input_sizes_are_rejected() {
    let params = build(&narrow(64, 64), 1).unwrap();
    assert!(forward(&params, &Tensor::zeros(Shape::new(1, 1, 48, 64))).is_err());
    assert!(forward(&params, &Tensor::zeros(Shape::new(1, 2, 64, 64))).is_err());
}

#[test]
fn batch_items_are_independent() {
    let params = build(&narrow(32, 64), 4).unwrap();
    let a = Tensor::from_fn(Shape::new(1, 1, 32, 64), |_, _, y, x| ((y * x) % 5) as f64 / 4.0).unwrap();
    let b = Tensor::from_fn(Shape::new(1, 1, 32, 64), |_, _, y, x| ((y + 2 * x) % 7) as f64 / 6.0).unwrap();
    let both = forward(&params, &Tensor::stack_batch(&[a.clone(), b.clone()]).unwrap()).unwrap();
    assert!(both.slice_batch(0..1).unwrap().bit_eq(&forward(&params, &a).unwrap()));
    assert!(both.slice_batch(1..2).unwrap().bit_eq(&forward(&params, &b).unwrap()));
}

#[test]
fn decoder_reuses_matching_pool_indices() {
    let cfg = narrow(64, 64);
    let params = build(&cfg, 2).unwrap();
    let mut trace = ForwardTrace::default();
    forward_traced(&params, &Tensor::full(Shape::new(1, 1, 64, 64), 0.5), Some(&mut trace)).unwrap();
    assert_eq!(trace.pools.len(), 5);
    assert_eq!(trace.unpools.len(), 5);
    for (pos, &(p, id)) in trace.unpools.iter().enumerate() {
        assert_eq!(p, pos + 1);
        let depth = 5 - pos;
        let &(d, pool_id) = trace.pools.iter().find(|(d, _)| *d == depth).unwrap();
        assert_eq!(d + pos + 1, 6);
        assert_eq!(pool_id, id);
    }
    for (pos, &(up, skip, cat)) in trace.decoder_inputs.iter().enumerate() {
        let depth = 5 - pos;
        assert_eq!(skip, *cfg.encoder_stages[depth - 1].last().unwrap());
        assert_eq!(up + skip, cat);
    }
}
