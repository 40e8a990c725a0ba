use proptest::prelude::*;
use vcaptcha_nn::{Arch, Graph, Model, PnetClConfig, SegNetConfig, Tensor, UnetClConfig};

fn conv(cin: usize, cout: usize, k: usize) -> usize {
    cin * cout * k * k + cout
}

/// Independent count of the two-Unet cascade, block by block.
fn wnet_oracle(base: usize, levels: usize) -> usize {
    let ch = |l: usize| base * 2usize.pow(l as u32);
    let block = |cin, cout| conv(cin, cout, 3) + conv(cout, cout, 3);
    // the second half takes the image and the first half's mask
    let half = |extra: bool| {
        let mut n = block(if extra { 2 } else { 1 }, ch(0));
        for l in 1..levels {
            n += block(ch(l - 1), ch(l));
        }
        for l in 0..levels - 1 {
            let skip = if extra { 2 * ch(l) } else { ch(l) };
            n += block(ch(l + 1) + skip, ch(l));
        }
        n + conv(ch(0), 1, 1)
    };
    half(false) + half(true)
}

fn ramp_batch(n: usize, h: usize, w: usize) -> Tensor {
    let data = (0..n * h * w).map(|i| ((i * 37) % 101) as f32 / 50.0 - 1.0).collect();
    Tensor::new(vec![n, 1, h, w], data).unwrap()
}

#[test]
fn default_wnet_parameter_count() {
    let m = Model::build(Arch::WnetSeg(SegNetConfig::default()), 0).unwrap();
    let n = m.count_parameters();
    assert_eq!(n, wnet_oracle(64, 4));
    assert!((15_000_000..=17_000_000).contains(&n), "{n}");
    assert_eq!(SegNetConfig::default().blocks_per_half() * 2, 14);
}

#[test]
fn freezing_drops_count_by_layer_size() {
    let mut m = Model::build(Arch::WnetSeg(SegNetConfig { base_channels: 4, ..Default::default() }), 0).unwrap();
    let before = m.count_parameters();
    m.store.set_trainable("unet1.enc0.conv1", false);
    assert_eq!(before - m.count_parameters(), conv(1, 4, 3));
}

#[test]
fn default_wnet_keeps_96_by_96() {
    let mut m = Model::build(Arch::WnetSeg(SegNetConfig::default()), 1).unwrap();
    let p = m.predict(&ramp_batch(1, 96, 96), 1).unwrap();
    assert_eq!(p.shape(), &[1, 1, 96, 96]);
    assert!(p.data().iter().all(|&v| v > 0.0 && v < 1.0));

    m.store.zero_prefix("unet2.head");
    let p = m.predict(&ramp_batch(1, 96, 96), 1).unwrap();
    assert!(p.data().iter().all(|&v| v == 0.5));
}

#[test]
fn pnet_feature_maps_stay_32_by_32() {
    let m = Model::build(Arch::PnetCl(PnetClConfig::default()), 0).unwrap();
    let mut g = Graph::new(&m.store, false, 0);
    let x = g.input(ramp_batch(2, 32, 32));
    let (logits, maps) = m.pnet_forward(&mut g, x).unwrap();
    assert_eq!(maps.len(), 5);
    for v in maps {
        assert_eq!(g.shape(v), &[2, 64, 32, 32]);
    }
    assert_eq!(g.shape(logits), &[2, 1]);
    let count = m.count_parameters();
    // published size of this classifier, printed for comparison only
    println!("PnetCl trainable parameters: {count} (reference ≈ 0.62e6)");
    assert_eq!(
        count,
        conv(1, 64, 3) + 4 * conv(64, 64, 3) + conv(320, 64, 1) + conv(64, 1, 1) + 1024 * 128 + 128 + 129
    );
}

#[test]
fn zero_weights_give_one_half() {
    for arch in [
        Arch::PnetCl(PnetClConfig::default()),
        Arch::UnetCl(UnetClConfig {
            base_channels: 8,
            ..Default::default()
        }),
    ] {
        let mut m = Model::build(arch, 0).unwrap();
        m.store.zero_all();
        let p = m.predict(&ramp_batch(3, 32, 32), 8).unwrap();
        assert_eq!(p.shape(), &[3, 1]);
        assert!(p.data().iter().all(|&v| v == 0.5));
    }
}

#[test]
fn classifiers_reject_wrong_input_size() {
    let m = Model::build(Arch::PnetCl(PnetClConfig::default()), 0).unwrap();
    assert!(m.predict(&ramp_batch(1, 48, 48), 1).is_err());
}

#[test]
fn forward_is_bit_stable() {
    let arch = Arch::WnetSeg(SegNetConfig {
        base_channels: 4,
        ..Default::default()
    });
    let a = Model::build(arch.clone(), 5).unwrap();
    let b = Model::build(arch, 5).unwrap();
    let x = ramp_batch(2, 32, 40);
    let pa = a.predict(&x, 2).unwrap();
    let pb = b.predict(&x, 1).unwrap();
    let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&pa), bits(&pb));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn wnet_preserves_shape_and_range(k in 1usize..5, j in 1usize..5, seed in 0u64..100, scale in 0.1f32..1.0e4) {
        let (h, w) = (8 * k, 8 * j);
        let m = Model::build(Arch::WnetSeg(SegNetConfig { base_channels: 2, ..Default::default() }), seed).unwrap();
        let x = Tensor::new(vec![1, 1, h, w], ramp_batch(1, h, w).data().iter().map(|v| v * scale).collect()).unwrap();
        let p = m.predict(&x, 1).unwrap();
        prop_assert_eq!(p.shape(), &[1, 1, h, w]);
        prop_assert!(p.data().iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn classifier_outputs_are_probabilities(seed in 0u64..1000) {
        let m = Model::build(Arch::PnetCl(PnetClConfig { filters: 4, mid_channels: 4, hidden: 8, ..Default::default() }), seed).unwrap();
        let p = m.predict(&ramp_batch(2, 32, 32), 2).unwrap();
        prop_assert!(p.data().iter().all(|&v| v > 0.0 && v < 1.0));
    }
}

#[test]
#[ignore]
fn step_timing() {
    use vcaptcha_nn::optim::{Adam, AdamConfig, Optimizer};
    for (base, size, batch) in [(8usize, 64usize, 16usize), (16, 64, 16), (8, 96, 16)] {
        let mut m = Model::build(Arch::WnetSeg(SegNetConfig { base_channels: base, input_size: size, ..Default::default() }), 0).unwrap();
        let mut opt = Adam::new(AdamConfig::default());
        let x = ramp_batch(batch, size, size);
        let t0 = std::time::Instant::now();
        for _ in 0..3 {
            let grads = {
                let mut g = Graph::new(&m.store, true, 0);
                let xi = g.input(x.clone());
                let l = m.forward(&mut g, xi).unwrap();
                let p = g.sigmoid(l);
                let (_, gr) = vcaptcha_nn::loss::dice_loss(g.value(p), &Tensor::zeros(g.shape(p))).unwrap();
                g.backward(p, gr).unwrap()
            };
            opt.step(&mut m.store, &grads);
        }
        println!("base {base} size {size} batch {batch}: {:?}/step", t0.elapsed() / 3);
    }
}

#[test]
#[ignore]
fn forward_timing() {
    let m = Model::build(Arch::WnetSeg(SegNetConfig { base_channels: 8, input_size: 64, ..Default::default() }), 0).unwrap();
    let x = ramp_batch(16, 64, 64);
    let t0 = std::time::Instant::now();
    for _ in 0..3 {
        let mut g = Graph::new(&m.store, true, 0);
        let xi = g.input(x.clone());
        m.forward(&mut g, xi).unwrap();
    }
    println!("forward: {:?}", t0.elapsed() / 3);
}
