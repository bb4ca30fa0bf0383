//! Scratch inspection of a trained checkpoint against its test set.

use std::collections::BTreeSet;

use uofs_core::data::store::load_dataset;
use uofs_core::eval::{grid_proposals, EvalConfig};
use uofs_core::train::load_checkpoint;
use uofs_core::Real;

fn main() {
    let run = std::env::args().nth(1).expect("usage: probe <run_dir>");
    let run = std::path::PathBuf::from(run);
    let (model, _, doc) =
        load_checkpoint::<Real>(&run.join("train_base/checkpoint.json")).unwrap();
    let test = load_dataset(&run.join("synth/test")).unwrap();
    println!(
        "head: |w_obj|={:.4} b={:.4} tau={} n_classes={}",
        model.head.w_obj[0].abs(),
        model.head.b[0],
        doc.tau,
        model.head.n_classes
    );
    for c in 0..model.head.w_cls.dim().1 {
        let col = model.head.w_cls.column(c);
        let n: f64 = col.iter().map(|v| v * v).sum::<f64>().sqrt();
        print!("‖w{c}‖={n:.3} ");
    }
    println!();

    let cfg = EvalConfig::default();
    let image = &test.images[0];
    let grid = grid_proposals(image.width(), image.height(), &cfg);
    println!("grid size {}", grid.len());
    let (features, _) = model.features(image);
    let boxes: Vec<(usize, uofs_core::geometry::BoxF)> =
        grid.iter().map(|b| (0usize, *b)).collect();
    let (tv, _) = model.forward_proposals(&features, &boxes).unwrap();
    let mut mags: Vec<f64> = Vec::new();
    let mut pobj: Vec<f64> = Vec::new();
    let mut best: Vec<(f64, usize)> = Vec::new();
    for i in 0..grid.len() {
        let fc = tv.f_cls.row(i);
        let fo = tv.f_obj.row(i);
        let mag: f64 = fo.iter().map(|v| v * v).sum::<f64>().sqrt();
        let probs = model.head.scores(&fc, &fo).unwrap();
        let po = model.head.joint_pbbs(&fc, &fo).unwrap().p_obj;
        let (bc, bs) = probs[..probs.len() - 1]
            .iter()
            .enumerate()
            .map(|(c, &s)| (c, s))
            .max_by(|a, b| a.1.partial_cmp(&b.1).unwrap())
            .map(|(c, s)| (c, s))
            .unwrap();
        mags.push(mag);
        pobj.push(po);
        best.push((bs, bc));
    }
    let stats = |v: &[f64]| {
        let mn = v.iter().cloned().fold(f64::INFINITY, f64::min);
        let mx = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mean = v.iter().sum::<f64>() / v.len() as f64;
        (mn, mean, mx)
    };
    println!("mag  (min/mean/max) {:?}", stats(&mags));
    println!("pobj (min/mean/max) {:?}", stats(&pobj));
    let scores: Vec<f64> = best.iter().map(|(s, _)| *s).collect();
    println!("best score (min/mean/max) {:?}", stats(&scores));
    let mut top: Vec<(f64, usize)> = best.clone();
    top.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap());
    println!("top5 {:?}", &top[..5.min(top.len())]);
    let gt: Vec<_> = image
        .instances
        .iter()
        .filter_map(|i| i.label.class_id().map(|c| (c, i.bbox)))
        .collect();
    println!("gt {gt:?}");

    // Magnitudes on ground-truth boxes for contrast with the grid.
    let novel: BTreeSet<u32> = BTreeSet::new();
    let _ = novel;
    let gt_boxes: Vec<(usize, uofs_core::geometry::BoxF)> =
        gt.iter().map(|(_, b)| (0usize, *b)).collect();
    if !gt_boxes.is_empty() {
        let (tv, _) = model.forward_proposals(&features, &gt_boxes).unwrap();
        for (i, (c, _)) in gt.iter().enumerate() {
            let fo = tv.f_obj.row(i);
            let fc = tv.f_cls.row(i);
            let mag: f64 = fo.iter().map(|v| v * v).sum::<f64>().sqrt();
            let j = model.head.joint_pbbs(&fc, &fo).unwrap();
            let probs: Vec<f64> = j.p.clone();
            println!(
                "gt class {c}: mag {mag:.3} p_obj {:.4} p {:?}",
                j.p_obj,
                probs.iter().map(|v| (v * 1e4).round() / 1e4).collect::<Vec<_>>()
            );
        }
    }
}
