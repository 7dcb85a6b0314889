// scratch calibration probe (not part of the deliverable)
use dianet::data::{synth_prototypes, synth_split, IMAGE_VALUES};

fn np_accuracy(seed: u64, m: usize, k: usize, difficulty: f64) -> f64 {
    let split = synth_split(seed, m, k, difficulty, "train");
    let protos = synth_prototypes(seed, k);
    let mut hits = 0;
    for i in 0..m {
        let img = &split.images[i * IMAGE_VALUES..(i + 1) * IMAGE_VALUES];
        let mut best = (f64::INFINITY, usize::MAX);
        for c in 0..k {
            let p = &protos[c * IMAGE_VALUES..(c + 1) * IMAGE_VALUES];
            let d2: f64 = img.iter().zip(p).map(|(a, b)| (a - b) * (a - b)).sum();
            if d2 < best.0 { best = (d2, c); }
        }
        if best.1 == split.labels[i] { hits += 1; }
    }
    hits as f64 / m as f64
}

fn main() {
    for difficulty in [17.0, 17.25, 17.5, 17.75] {
        let accs: Vec<f64> = (0..5).map(|s| np_accuracy(100 + s, 2000, 4, difficulty)).collect();
        let mean = accs.iter().sum::<f64>() / accs.len() as f64;
        println!("difficulty {difficulty:5.1}: mean NP acc {:.4}  (seeds: {:?})", mean,
            accs.iter().map(|a| (a * 1000.0).round() / 1000.0).collect::<Vec<_>>());
    }
}
