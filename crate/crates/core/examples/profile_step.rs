use musasplat::diff::Graph;
use musasplat::model::{Model, ModelConfig};
use musasplat::scene::{generate_scene, SceneSpec};
use musasplat::splat::{render_diff, RenderSettings};
use std::time::Instant;

fn main() {
    let size = 64;
    let scene = generate_scene(&SceneSpec { image_size: size, ..Default::default() }).unwrap();
    let model = Model::build(&ModelConfig { image_size: size, ..Default::default() });
    let images: Vec<_> = scene.train_views().iter().map(|v| v.image.clone()).collect();
    let geom = model.infer_geometry(&images).unwrap();
    // simulate 6 input views (2 real + 4 synthetic): duplicate
    let mut all_images = images.clone();
    let mut bases = geom.pointmaps.clone();
    for i in 0..4 { all_images.push(images[i % 2].clone()); bases.push(geom.pointmaps[i % 2].clone()); }

    for trial in 0..3 {
        let t0 = Instant::now();
        let mut g = Graph::new();
        let enc = model.encode(&mut g, &all_images).unwrap();
        let t_enc = t0.elapsed();
        let (fused, _e) = model.aggregate(&mut g, &enc).unwrap();
        let t_agg = t0.elapsed();
        let dec = model.decode(&mut g, &fused).unwrap();
        let t_dec = t0.elapsed();
        let nodes = model.gaussian_head_forward(&mut g, &dec, &all_images, &bases).unwrap();
        let t_head = t0.elapsed();
        let settings = RenderSettings::new(size, size);
        let mut renders = vec![];
        for p in &geom.render_poses {
            renders.push(render_diff(&mut g, nodes.means, nodes.opacity_logits, nodes.log_scales, nodes.rotations, nodes.sh, p, &scene.intrinsics, &settings).image);
        }
        for p in &geom.render_poses { // 4 more as aug stand-ins
            renders.push(render_diff(&mut g, nodes.means, nodes.opacity_logits, nodes.log_scales, nodes.rotations, nodes.sh, p, &scene.intrinsics, &settings).image);
            renders.push(render_diff(&mut g, nodes.means, nodes.opacity_logits, nodes.log_scales, nodes.rotations, nodes.sh, p, &scene.intrinsics, &settings).image);
        }
        let t_render = t0.elapsed();
        let mut loss = None;
        for r in &renders {
            let tgt = g.constant(vec![size, size, 3], vec![0.5; size*size*3]);
            let l = g.mse(*r, tgt);
            loss = Some(match loss { None => l, Some(a) => g.add(a, l) });
        }
        let loss = loss.unwrap();
        let t_loss = t0.elapsed();
        let _grads = g.backward(loss);
        let t_back = t0.elapsed();
        if trial == 2 {
            println!("nodes: {}", g.len());
            println!("encode  {:>7.1} ms", t_enc.as_secs_f64()*1e3);
            println!("agg     {:>7.1} ms", (t_agg - t_enc).as_secs_f64()*1e3);
            println!("decode  {:>7.1} ms", (t_dec - t_agg).as_secs_f64()*1e3);
            println!("head    {:>7.1} ms", (t_head - t_dec).as_secs_f64()*1e3);
            println!("render6 {:>7.1} ms", (t_render - t_head).as_secs_f64()*1e3);
            println!("loss    {:>7.1} ms", (t_loss - t_render).as_secs_f64()*1e3);
            println!("backward{:>7.1} ms", (t_back - t_loss).as_secs_f64()*1e3);
            println!("total   {:>7.1} ms", t_back.as_secs_f64()*1e3);
        }
    }
}
