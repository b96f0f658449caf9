// Scratch probe: single-sample overfit dynamics (will be replaced).
use digseg::codec::{LatentCodec, ToyAutoencoder};
use digseg::dataset;
use digseg::denoiser::{train, DenoiserConfig, TrainConfig};
use digseg::noise::{NoiseMode, NoisePyramidConfig};
use digseg::schedule::build_schedule;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let lr: f64 = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(1e-3);
    let steps: usize = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(2000);

    let dir = tempfile::tempdir().unwrap();
    dataset::generate(40, 1, dir.path()).unwrap();
    let mut corpus = dataset::load(dir.path()).unwrap();
    // Shrink every record to 16x16 via 4x4 block majority/mean for a fast
    // identity-codec overfit probe.
    for rec in corpus.train.iter_mut() {
        let mut img = image::RgbImage::new(16, 16);
        let mut lab = ndarray::Array2::zeros((16, 16));
        for y in 0..16u32 {
            for x in 0..16u32 {
                let mut acc = [0u32; 3];
                for dy in 0..4u32 {
                    for dx in 0..4u32 {
                        let p = rec.image.get_pixel(x * 4 + dx, y * 4 + dy);
                        for c in 0..3 { acc[c] += p.0[c] as u32; }
                    }
                }
                img.put_pixel(x, y, image::Rgb([0,1,2].map(|c| (acc[c] / 16) as u8)));
                lab[[y as usize, x as usize]] = rec.labels.labels[[y as usize * 4 + 2, x as usize * 4 + 2]];
            }
        }
        rec.image = img;
        rec.labels = digseg::codec::LabelMap::new(lab);
    }
    // Pick a single-class scene for a deterministic (image, mask, class) triple.
    fn out2_rec(corpus: &digseg::dataset::Corpus) -> digseg::dataset::SceneRecord {
        corpus
            .train
            .iter()
            .find(|r| r.labels.present_ids().iter().filter(|&&id| id != 0).count() == 1)
            .expect("a single-class scene exists")
            .clone()
    }
    let rec = out2_rec(&corpus);

    let codec = LatentCodec::Identity;

    let schedule = build_schedule(50, 0.02, 0.2).unwrap();
    let cfg = TrainConfig {
        iterations: steps,
        batch_size: 8,
        learning_rate: lr,
        weight_decay: 0.0,
        seed: 0,
        noise: NoisePyramidConfig { levels: 0, decay: 0.5, mode: NoiseMode::Gaussian },
        augment: false,
        log_every: 100,
    };
    let dcfg = DenoiserConfig::default();
    let t0 = std::time::Instant::now();
    let out = train(
        &[rec],
        &corpus.palette,
        &corpus.vocab,
        &codec,
        &cfg,
        &dcfg,
        &schedule,
        |step, loss| println!("step {step}: {loss:.6}"),
        0,
        |_, _| Ok(()),
    )
    .unwrap();
    // Per-timestep loss profile with the trained model.
    use digseg::conditioning::embed_class;
    use digseg::denoiser::{forward_noising, LatentSample, diffusion_loss};
    use digseg::codec::mask_to_rgb;
    let rec2 = out2_rec(&corpus);
    let z_x = codec.encode(&rec2.image_grid()).unwrap();
    let z_y = codec.encode(&mask_to_rgb(&rec2.labels, &corpus.palette).unwrap()).unwrap();
    let cid = rec2.labels.present_ids().into_iter().find(|&id| id != 0).unwrap();
    let name = corpus.palette.entry(cid).unwrap().name.clone();
    let t_clip = embed_class(&name, &corpus.vocab).unwrap();
    for t in [1usize, 2, 5, 10, 25, 50] {
        let mut acc = 0.0;
        let reps = 20;
        for k in 0..reps {
            let eps = digseg::noise::sample_noise(z_y.shape(), &cfg.noise, t, &schedule, 777 + k).unwrap();
            let z_t = forward_noising(&z_y, &eps, t, &schedule).unwrap();
            use digseg::denoiser::NoisePredictor;
            let eps_hat = out.denoiser.predict_noise(&z_t, &z_x, t - 1, &t_clip).unwrap();
            let n = eps.data.len() as f64;
            acc += (&eps_hat.data - &eps.data).mapv(|v| v * v).sum() / n;
        }
        println!("t={t}: loss {:.6}", acc / reps as f64);
    }

    // Tail mean over the last 10 logged points.
    let tail: Vec<f64> = out.loss_curve.iter().rev().take(10).map(|(_, l)| *l).collect();
    println!(
        "lr={lr} steps={steps}: tail mean loss {:.6} ({:.1}s)",
        tail.iter().sum::<f64>() / tail.len() as f64,
        t0.elapsed().as_secs_f64()
    );
}
