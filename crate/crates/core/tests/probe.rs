use tcblstm::data::{extract_windows, generate_synthetic, SyntheticSpec};
use tcblstm::layers::TimeConvSpec;
use tcblstm::model::{backward, forward, init_params, ModelConfig, Variant};
use tcblstm::optim::{evaluate, sgd_step};
use tcblstm::tensor::Tensor;

fn default_data() -> (tcblstm::data::WindowDataset, tcblstm::data::WindowDataset) {
    let spec = SyntheticSpec::default();
    let data = generate_synthetic(&spec).unwrap();
    (
        extract_windows(&data.train, 21).unwrap(),
        extract_windows(&data.dev, 21).unwrap(),
    )
}

#[test]
fn probe_overfit_one_batch() {
    let (train, _) = default_data();
    let config = ModelConfig {
        variant: Variant::TcDnnBlstmDnn,
        feat_dim: 16,
        tc: TimeConvSpec::new(21, 5, true).unwrap(),
        input_dnn_layers: vec![32],
        cell_dim: 16,
        blstm_layers: 1,
        output_dnn_layers: vec![32],
        num_classes: 4,
        seed: 1,
        lstm_init_range: 0.1,
        dnn_init_std: 0.1,
    };
    let mut params = init_params::<f32>(&config).unwrap();
    let idx: Vec<usize> = (0..64).collect();
    let (x, t) = train.gather(&idx);
    for step in 0..300 {
        let (_, cache) = forward(&params, &config, &x, true).unwrap();
        let (loss, grads) = backward(&params, &config, &cache, &t).unwrap();
        sgd_step(&mut params, &grads, 0.1).unwrap();
        if step % 50 == 0 {
            println!("overfit step {step}: loss {loss:.4}");
        }
    }
    let (posteriors, _) = forward(&params, &config, &x, false).unwrap();
    let pred = tcblstm::tensor::argmax_rows(&posteriors);
    let acc = pred.iter().zip(t.iter()).filter(|(a, b)| a == b).count() as f32 / 64.0;
    println!("overfit final acc {acc}");
}

#[test]
fn probe_dnn_longer() {
    let (train, dev) = default_data();
    let config = ModelConfig {
        variant: Variant::Dnn,
        feat_dim: 16,
        tc: TimeConvSpec::new(21, 5, true).unwrap(),
        input_dnn_layers: vec![64, 64],
        cell_dim: 0,
        blstm_layers: 1,
        output_dnn_layers: vec![],
        num_classes: 4,
        seed: 1,
        lstm_init_range: 0.1,
        dnn_init_std: 0.05,
    };
    let mut params = init_params::<f32>(&config).unwrap();
    // flat lr, plain loop over shuffled batches
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 1..=6u32 {
        tcblstm::optim::shuffle_indices(&mut order, 1, epoch, 0);
        let mut losses = vec![];
        for chunk in order.chunks(128) {
            let (x, t) = train.gather(chunk);
            let (_, cache) = forward(&params, &config, &x, true).unwrap();
            let (loss, grads) = backward(&params, &config, &cache, &t).unwrap();
            sgd_step(&mut params, &grads, 0.05).unwrap();
            losses.push(loss);
        }
        let (dl, da) = evaluate(&params, &config, &dev, 256).unwrap();
        println!(
            "dnn flat-lr epoch {epoch}: train {:.4} dev {dl:.4} acc {da:.4}",
            tcblstm::optim::mean_batch_loss(&losses)
        );
    }
}

#[test]
fn probe_window_logistic() {
    // linear softmax on the flat window: is there ANY linear signal?
    let (train, dev) = default_data();
    let width = train.windows.cols();
    let config = ModelConfig {
        variant: Variant::Dnn,
        feat_dim: 16,
        tc: TimeConvSpec::new(21, 1, true).unwrap(),
        input_dnn_layers: vec![1],
        cell_dim: 0,
        blstm_layers: 1,
        output_dnn_layers: vec![],
        num_classes: 4,
        seed: 1,
        lstm_init_range: 0.1,
        dnn_init_std: 0.1,
    };
    let _ = config;
    // hand-rolled multinomial logistic in f32 via tensor ops
    let mut w = Tensor::<f32>::zeros(width, 4);
    let mut b = Tensor::<f32>::zeros(1, 4);
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 1..=8u32 {
        tcblstm::optim::shuffle_indices(&mut order, 2, epoch, 0);
        for chunk in order.chunks(128) {
            let (x, t) = train.gather(chunk);
            let logits = x.matmul(&w).unwrap().add_row_vector(&b).unwrap();
            let p = tcblstm::tensor::softmax_rows(&logits);
            let (_, g) = tcblstm::tensor::cross_entropy(&p, &t).unwrap();
            let gw = x.matmul_at_b(&g).unwrap();
            let gb = g.col_sums();
            w.add_assign_scaled(&gw, -0.05).unwrap();
            b.add_assign_scaled(&gb, -0.05).unwrap();
        }
        // dev accuracy
        let idx: Vec<usize> = (0..dev.len()).collect();
        let (x, t) = dev.gather(&idx);
        let logits = x.matmul(&w).unwrap().add_row_vector(&b).unwrap();
        let pred = tcblstm::tensor::argmax_rows(&logits);
        let acc = pred.iter().zip(t.iter()).filter(|(a, c)| a == c).count() as f32 / t.len() as f32;
        println!("logistic-on-window epoch {epoch}: dev acc {acc:.4}");
    }
}
