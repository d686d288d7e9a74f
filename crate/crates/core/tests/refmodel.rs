use adequacy_lab::refmodel::{
    self, Activation, DatasetKind, DatasetSpec, LabeledDataset, ModelConfig, TrainConfig, TrainedModel,
};
use adequacy_lab::traces::SplitTag;

fn fixture(activation: Activation) -> (TrainedModel, LabeledDataset) {
    let mut model =
        TrainedModel::initialize(&ModelConfig::mlp(vec![2, 2, 2], activation, 11), &TrainConfig::adam(0, 1, 0.01, 0))
            .unwrap();
    // Fixed weights keep every pre-activation away from the ReLU kink.
    model.network.layers[0].weights = vec![0.7, -0.4, 0.3, 0.9];
    model.network.layers[0].bias = vec![0.1, 0.2];
    model.network.layers[1].weights = vec![-0.6, 0.8, 0.5, 0.25];
    model.network.layers[1].bias = vec![0.05, -0.15];
    let data = LabeledDataset::new(vec![0.5, 0.2, 0.9, 0.4, 0.3, 0.8], 2, vec![0, 1, 1], 2).unwrap();
    (model, data)
}

fn check_gradients(activation: Activation) {
    let h = 1e-5;
    let (model, data) = fixture(activation);
    let (_, grads) = refmodel::loss_and_gradients(&model, &data).unwrap();
    let mut checked = 0;
    for l in 0..model.network.layers.len() {
        let n_w = model.network.layers[l].weights.len();
        let n_b = model.network.layers[l].bias.len();
        for idx in 0..n_w + n_b {
            let numeric = {
                let mut plus = model.clone();
                let mut minus = model.clone();
                if idx < n_w {
                    plus.network.layers[l].weights[idx] += h;
                    minus.network.layers[l].weights[idx] -= h;
                } else {
                    plus.network.layers[l].bias[idx - n_w] += h;
                    minus.network.layers[l].bias[idx - n_w] -= h;
                }
                (refmodel::loss(&plus, &data).unwrap() - refmodel::loss(&minus, &data).unwrap()) / (2.0 * h)
            };
            let analytic =
                if idx < n_w { grads.layers[l].weights[idx] } else { grads.layers[l].bias[idx - n_w] };
            let scale = analytic.abs().max(numeric.abs());
            let rel = if scale < 1e-9 { 0.0 } else { (analytic - numeric).abs() / scale };
            assert!(rel < 1e-4, "{activation:?} layer {l} param {idx}: analytic {analytic} numeric {numeric} rel {rel}");
            checked += 1;
        }
    }
    assert_eq!(checked, 12);
}

#[test]
fn gradients_match_central_differences() {
    for a in [Activation::Relu, Activation::Tanh, Activation::Sigmoid, Activation::LogSigmoid] {
        check_gradients(a);
    }
}

#[test]
fn rings_need_a_hidden_layer() {
    let spec = DatasetSpec::new(DatasetKind::Rings { classes: 2, samples: 600, noise: 0.03 });
    let splits = refmodel::make_dataset(&spec, 5).unwrap();
    let cfg = TrainConfig::adam(150, 16, 0.01, 6);
    let linear = refmodel::train(&splits.train, &ModelConfig::mlp(vec![2, 2], Activation::Relu, 7), &cfg).unwrap();
    let hidden =
        refmodel::train(&splits.train, &ModelConfig::mlp(vec![2, 16, 2], Activation::Relu, 7), &cfg).unwrap();
    let lin_acc = refmodel::accuracy(&linear, &splits.test).unwrap();
    let hid_acc = refmodel::accuracy(&hidden, &splits.test).unwrap();
    assert!(lin_acc < 0.8, "linear model reached {lin_acc}");
    assert!(hid_acc > 0.9, "hidden-layer model reached only {hid_acc}");
}

#[test]
fn single_layer_latents_are_hand_computable() {
    let mut model =
        TrainedModel::initialize(&ModelConfig::mlp(vec![2, 3], Activation::Relu, 1), &TrainConfig::adam(0, 1, 0.1, 0))
            .unwrap();
    model.network.layers[0].weights = vec![1.0, 2.0, -1.0, 0.5, 0.0, 3.0];
    model.network.layers[0].bias = vec![0.0, 0.25, -0.5];
    let data = LabeledDataset::new(vec![1.0, 0.0, 0.0, 1.0], 2, vec![0, 2], 3).unwrap();
    let traces = refmodel::extract_traces(&model, &data, SplitTag::Test).unwrap();
    assert_eq!(traces.latent_dim(), 3);
    // input [1,0] picks the first column of W plus the bias
    assert_eq!(traces.latent(0), &[1.0, -0.75, -0.5]);
    assert_eq!(traces.latent(1), &[2.0, 0.75, 2.5]);
    assert_eq!(traces.get(0).predicted, 0);
    assert_eq!(traces.get(1).predicted, 2);
}

#[test]
fn trace_export_is_deterministic_for_a_trained_model() {
    let spec = DatasetSpec::new(DatasetKind::Blobs { classes: 3, samples: 300, dim: 4, spread: 0.05 });
    let splits = refmodel::make_dataset(&spec, 2).unwrap();
    let m = ModelConfig::mlp(vec![4, 8, 3], Activation::Tanh, 3);
    let t = TrainConfig::adam(10, 16, 0.01, 4);
    let a = refmodel::train(&splits.train, &m, &t).unwrap();
    let b = refmodel::train(&splits.train, &m, &t).unwrap();
    assert_eq!(a.network, b.network);
    let ta = refmodel::extract_traces(&a, &splits.test, SplitTag::Test).unwrap();
    let tb = refmodel::extract_traces(&b, &splits.test, SplitTag::Test).unwrap();
    assert_eq!(ta, tb);
    for tr in ta.traces() {
        assert_eq!(tr.predicted, refmodel::argmax(tr.latent.as_slice()));
    }
}
