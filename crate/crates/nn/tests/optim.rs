use vcaptcha_nn::loss::dice_loss;
use vcaptcha_nn::optim::{Adam, AdamConfig, Optimizer};
use vcaptcha_nn::{Graph, ParamStore, Tensor};

// A perfect binary prediction gives a zero Dice gradient, so an Adam step
// must leave the weights where they are.
#[test]
fn perfect_prediction_step_leaves_weights() {
    let target: Vec<f32> = (0..64).map(|i| f32::from(u8::from(i % 7 == 0))).collect();
    let target = Tensor::new(vec![1, 1, 8, 8], target).unwrap();
    let mut store = ParamStore::new();
    let id = store.add("pred", target.clone());
    let before = store.clone();
    let grads = {
        let mut g = Graph::new(&store, true, 0);
        let p = g.param(id);
        let (loss, grad) = dice_loss(g.value(p), &target).unwrap();
        assert_eq!(loss, 0.0);
        g.backward(p, grad).unwrap()
    };
    let mut opt = Adam::new(AdamConfig::default());
    opt.step(&mut store, &grads);
    for (a, b) in store.get(id).value.data().iter().zip(before.get(id).value.data()) {
        assert!(((a - b) as f64).abs() < 1e-12);
    }
}
