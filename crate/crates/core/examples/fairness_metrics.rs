//! Group fairness metrics on a small hand-made score table.

use fairdetect::metrics::{auc, es_auc, f_dp, f_fpr, subgroup_aucs, EvalRecord};
use fairdetect::Result;

fn main() -> Result<()> {
    // (score, label, subgroup)
    let rows = [
        (0.9, 1, 0),
        (0.6, 0, 0),
        (0.3, 0, 0),
        (0.8, 1, 0),
        (0.7, 1, 1),
        (0.2, 0, 1),
        (0.4, 0, 1),
        (0.55, 1, 1),
        (0.65, 0, 2),
        (0.75, 0, 2),
        (0.85, 1, 2),
        (0.5, 1, 2),
    ];
    let records: Vec<EvalRecord> = rows.iter().map(|&(s, l, g)| EvalRecord::new(s, l, g, 0.5)).collect();
    let scores: Vec<f64> = rows.iter().map(|r| r.0).collect();
    let labels: Vec<u8> = rows.iter().map(|r| r.1).collect();

    println!("AUC    {:.4}", auc(&scores, &labels)?);
    let (_, per_group, _) = subgroup_aucs(&records)?;
    for (g, a) in &per_group {
        println!("  subgroup {g} AUC {a:.4}");
    }
    println!("F_FPR  {:.4}", f_fpr(&records)?.value);
    println!("F_DP   {:.4}", f_dp(&records)?.value);
    println!("es-AUC {:.4}", es_auc(&records)?.value);
    Ok(())
}
