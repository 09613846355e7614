use ndarray::Array4;
use replaycl::continual::load_learner;
use replaycl::datasets::{build_task_sequence, load_task_data, Sample, Split};
use std::path::Path;

fn batch(images: &[&Sample]) -> Array4<f32> {
    let (c, h, w) = images[0].image.dim();
    let mut x = Array4::zeros((images.len(), c, h, w));
    for (i, s) in images.iter().enumerate() {
        x.slice_mut(ndarray::s![i, .., .., ..]).assign(&s.image);
    }
    x
}

#[test]
fn probe() {
    let ckpt = Path::new("/tmp/probe_damp/checkpoint");
    let state = load_learner::<f32>(ckpt).unwrap();
    let cur = state.current_task;
    println!("current_task = {cur}");
    let seq = build_task_sequence("mnist", 5, 1).unwrap();
    let root = Path::new("/root/crate/data");
    for eval_task in 1..=cur {
        let test = load_task_data(&seq, eval_task, Split::Test, root).unwrap();
        let classes = &seq.task(eval_task).unwrap().class_labels;
        for (mod_i, head_i) in [(eval_task, eval_task), (cur, cur)] {
            let module = state.module(mod_i).unwrap();
            let head = &state.module(head_i).unwrap().head;
            let mut correct = 0usize;
            let mut total = 0usize;
            for chunk in test.chunks(64) {
                let refs: Vec<&Sample> = chunk.iter().collect();
                let x = batch(&refs);
                let rs = state.shared.forward_batch(&x, None, None).unwrap();
                let rp = module.vae.forward_batch(&x, None, None).unwrap();
                let (n, c, h, w) = rs.x_hat.dim();
                let mut hin = Array4::zeros((n, 2 * c, h, w));
                hin.slice_mut(ndarray::s![.., ..c, .., ..]).assign(&rs.x_hat);
                hin.slice_mut(ndarray::s![.., c.., .., ..]).assign(&rp.x_hat);
                let (logits, _) = head.forward(&hin);
                for (r, s) in refs.iter().enumerate() {
                    let row = logits.row(r);
                    let pred = *classes
                        .iter()
                        .max_by(|&&a, &&b| row[a].partial_cmp(&row[b]).unwrap())
                        .unwrap();
                    if pred == s.class_label {
                        correct += 1;
                    }
                    total += 1;
                }
            }
            println!(
                "task {eval_task}  module P^{mod_i}  head p^{head_i}: {:.2}%",
                100.0 * correct as f64 / total as f64
            );
        }
    }
}
