//! Trains one method on seeded phantoms and reports held-out error.
//!
//! `cargo run --release --example phantom_benchmark -- <method> [train] [test] [folds]`

use std::time::Instant;

use gpp_core::evalrank::{evaluate_predictions, kfold_split, TruthRecord};
use gpp_core::phantom::{generate_dataset, PhantomJitter, PhantomSpec};
use gpp_core::pipeline::{detect_volume, train_method, LabeledRef, Method, MethodSettings};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let method: Method = args.first().map(String::as_str).unwrap_or("axial-close").parse()?;
    let n_train: usize = args.get(1).map(|s| s.parse()).transpose()?.unwrap_or(60);
    let n_test: usize = args.get(2).map(|s| s.parse()).transpose()?.unwrap_or(20);
    let folds: usize = args.get(3).map(|s| s.parse()).transpose()?.unwrap_or(1);

    let jitter = PhantomJitter {
        gppi: 30,
        protrusion_radius_vox: 1.0,
        shaft_radius_vox: 2.0,
    };
    let base = PhantomSpec::default();
    let train_items = generate_dataset(n_train, &base, &jitter, 11)?;
    let test_items = generate_dataset(n_test, &base, &jitter, 12)?;
    let truths: Vec<TruthRecord> = test_items.iter().map(|i| i.truth()).collect();
    let settings = MethodSettings::default_for(method);

    let ids: Vec<(String, String)> = train_items
        .iter()
        .map(|i| (i.annotation.volume_id.clone(), i.study.to_string()))
        .collect();
    let split = if folds > 1 { Some(kfold_split(&ids, folds, 5)?) } else { None };
    let mut all_preds = vec![Vec::new(); n_test];
    for fold in 0..folds {
        let t0 = Instant::now();
        let data: Vec<LabeledRef> = train_items
            .iter()
            .filter(|i| split.as_ref().is_none_or(|s| s.fold_of[&i.annotation.volume_id] != fold))
            .map(|i| LabeledRef {
                volume: &i.volume,
                gppi: i.annotation.gppi,
            })
            .collect();
        let model = train_method(&settings, &data, fold as u64)?;
        let t_train = t0.elapsed().as_secs_f64();
        for h in &model.history {
            let show: Vec<String> = h.iter().map(|v| format!("{v:.4}")).collect();
            println!("history: {}", show.join(" "));
        }
        let t1 = Instant::now();
        let mut preds = Vec::new();
        for (k, item) in test_items.iter().enumerate() {
            let d = detect_volume(&model, &item.volume)?;
            all_preds[k].push(d.gppi_pred);
            preds.push((d.volume_id.clone(), d.gppi_pred));
            print!("{:+} ", d.gppi_pred - item.annotation.gppi as i64);
        }
        println!();
        let rep = evaluate_predictions(method.name(), &preds, &truths)?;
        println!(
            "{method} fold {fold}: mae {:.2} sum {:.3} train {:.1}s detect {:.1}s",
            rep.mae,
            rep.sum_score,
            t_train,
            t1.elapsed().as_secs_f64()
        );
    }
    if folds > 1 {
        let preds: Vec<(String, i64)> = test_items
            .iter()
            .zip(&all_preds)
            .map(|(i, p)| {
                (
                    i.annotation.volume_id.clone(),
                    gpp_core::detect::ensemble_predictions(p).unwrap(),
                )
            })
            .collect();
        let rep = evaluate_predictions(method.name(), &preds, &truths)?;
        println!("{method} ensemble: mae {:.2} sum {:.3}", rep.mae, rep.sum_score);
    }
    Ok(())
}
