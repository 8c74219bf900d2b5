use std::time::Instant;
use densedesc_core::backbone::{build_network, BackboneConfig};
use densedesc_core::loss::{pair_loss_on_maps, LossConfig, LossKind};
use densedesc_core::matching::PixelLoc;
use densedesc_core::synth::{Dataset, Split};
use densedesc_core::train::sgd_step;

fn main() {
    let dataset = Dataset::open(std::path::Path::new("/tmp/desk_data")).unwrap();
    let meta = dataset.split(Split::Train)[0];
    let pair = dataset.load_pair(meta).unwrap();
    let mut net = build_network(&BackboneConfig::desk()).unwrap();
    let corr: Vec<(PixelLoc, PixelLoc)> = pair.corr.points.iter().cycle().take(128).cloned().collect();

    // warmup
    for _ in 0..2 {
        let s = net.forward(&pair.source).unwrap();
        let t = net.forward(&pair.target).unwrap();
        let l = pair_loss_on_maps(&s, &t, &corr, &LossConfig::default(), LossKind::Rr).unwrap();
        l.backward().unwrap();
        net.clear_grads();
    }

    let n = 10;
    let t0 = Instant::now();
    let mut maps = Vec::new();
    for _ in 0..n {
        maps.push(net.forward(&pair.source).unwrap());
    }
    let fwd = t0.elapsed().as_secs_f64() / n as f64;

    let t0 = Instant::now();
    let mut losses = Vec::new();
    for i in 0..n {
        let s = &maps[i.min(maps.len()-1)];
        losses.push(pair_loss_on_maps(s, s, &corr, &LossConfig::default(), LossKind::Rr).unwrap());
    }
    let loss_fwd = t0.elapsed().as_secs_f64() / n as f64;

    let t0 = Instant::now();
    for l in &losses {
        l.backward().unwrap();
    }
    let bwd = t0.elapsed().as_secs_f64() / n as f64;

    let t0 = Instant::now();
    sgd_step(net.parameters_mut().iter_mut().map(|p| &mut p.tensor), 1e-4).unwrap();
    let sgd = t0.elapsed().as_secs_f64();

    println!("backbone forward: {:.1} ms", fwd * 1e3);
    println!("poi+loss forward (128 corr): {:.1} ms", loss_fwd * 1e3);
    println!("full backward: {:.1} ms", bwd * 1e3);
    println!("sgd step: {:.2} ms", sgd * 1e3);
}
