use dianet::config::parse_config_file;
use dianet::data::{load_splits, normalize, IMAGE_SIDE, IMAGE_VALUES};
use dianet::ops::argmax_rows;
use dianet::tensor::Tensor;
use dianet::train::load_checkpoint;
use std::path::Path;

fn main() {
    let cfg = parse_config_file(Path::new("/tmp/cal/probe_8_0.1.cfg")).unwrap();
    let (net, stats) = load_checkpoint(
        &cfg.network,
        Path::new("/tmp/cal/probe_8_0.1/checkpoint.dia"),
        1,
    )
    .unwrap();
    let (train_raw, _) = load_splits(&cfg.train.data, cfg.train.seed, 512, 512).unwrap();
    let ds = normalize(&train_raw, &stats);

    for training in [false, true] {
        let mut hits = 0;
        for chunk in (0..ds.len()).collect::<Vec<_>>().chunks(16) {
            let mut data = Vec::new();
            for &i in chunk {
                data.extend_from_slice(&ds.images[i * IMAGE_VALUES..(i + 1) * IMAGE_VALUES]);
            }
            let images = Tensor::from_vec(data, &[chunk.len(), 3, IMAGE_SIDE, IMAGE_SIDE]);
            let out = net.forward(&images, training, false).unwrap();
            let pred = argmax_rows(&out.logits);
            hits += pred.iter().zip(chunk).filter(|(p, &i)| **p == ds.labels[i]).count();
        }
        println!("training_mode={training}: acc {}", hits as f64 / ds.len() as f64);
    }
    // peek at a few running stats entries
    for (id, _, data) in net.export_state().iter().filter(|(id, _, _)| id.contains("running")).take(8) {
        let mn = data.iter().cloned().fold(f64::INFINITY, f64::min);
        let mx = data.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        println!("{id}: min {mn:.4} max {mx:.4}");
    }
}
