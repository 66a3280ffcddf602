use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use uio_core::data_io::synth::shapes_image;
use uio_core::vq::{train_vq, VqConfig, VqTrainOptions};

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let steps: usize = args.get(1).map(|s| s.parse().unwrap()).unwrap_or(2000);
    let batch: usize = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(8);
    let lr: f64 = args.get(3).map(|s| s.parse().unwrap()).unwrap_or(1e-3);
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let train: Vec<_> = (0..2000).map(|_| shapes_image(64, 64, &mut rng)).collect();
    let held: Vec<_> = (0..100).map(|_| shapes_image(64, 64, &mut rng)).collect();
    let t = std::time::Instant::now();
    let opts = VqTrainOptions { steps, batch_images: batch, lr, eval_every: 250, ..Default::default() };
    let (_, rep) = train_vq(&train, &held, VqConfig::default(), opts).unwrap();
    println!("{:?}\nusage {} reseeded {} time {:?}", rep.evals, rep.usage, rep.reseeded, t.elapsed());
}
