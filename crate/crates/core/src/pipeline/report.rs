//! Tables over finished runs: the model comparison, the loss screen and
//! training curves.

use serde::{Deserialize, Serialize};

use crate::losses::LossKind;
use crate::nn::train::TrainHistory;
use crate::pipeline::dataset::WindowSample;
use crate::pipeline::experiment::{evaluate_model, train_model, EvalReport, EvalSettings, TrainOptions};
use crate::{Error, Result};

fn opt(v: Option<f64>) -> String {
    v.map_or("-".into(), |v| format!("{v:.3}"))
}

/// Markdown table of AUCs, sizes and latencies, one row per report.
pub fn summary_markdown(reports: &[EvalReport]) -> String {
    let mut s = String::from(
        "| model | loss | auc_acc | auc_aud | auc_best | params | bytes | mean ms | std ms |\n\
         |---|---|---|---|---|---|---|---|---|\n",
    );
    for r in reports {
        s.push_str(&format!(
            "| {} | {} | {} | {} | {:.3} | {} | {} | {} | {} |\n",
            r.model_id,
            r.loss_id,
            opt(r.auc_acc),
            opt(r.auc_aud),
            r.auc_best,
            r.param_count,
            r.model_bytes,
            ms(r.mean_inference_ms),
            ms(r.std_inference_ms)
        ));
    }
    s
}

fn ms(v: f64) -> String {
    if v.is_finite() {
        format!("{v:.3}")
    } else {
        "-".into()
    }
}

/// `epoch,train_loss,val_loss,kept` rows.
pub fn history_csv(h: &TrainHistory) -> String {
    let mut s = String::from("epoch,train_loss,val_loss,kept\n");
    for (i, t) in h.train_loss.iter().enumerate() {
        let v = h.val_loss.get(i).map_or(String::new(), |v| v.to_string());
        s.push_str(&format!("{i},{t},{v},{}\n", u8::from(i == h.best_epoch)));
    }
    s
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossScreenRow {
    pub loss: LossKind,
    pub model_id: String,
    pub auc: f64,
    pub best_epoch: usize,
}

/// Trains one model per loss, scoring with the loss it was trained on.
pub fn loss_screen(
    train: &[WindowSample],
    test: &[WindowSample],
    base: &TrainOptions,
    settings: &EvalSettings<'_>,
) -> Result<Vec<LossScreenRow>> {
    LossKind::ALL
        .iter()
        .map(|&loss| {
            let mut opts = base.clone();
            opts.train.loss = loss.id().to_string();
            let (model, history) = train_model(train, &opts)?;
            let report = evaluate_model(&model, test, &EvalSettings { loss, ..*settings })?;
            Ok(LossScreenRow { loss, model_id: report.model_id, auc: report.auc_best, best_epoch: history.best_epoch })
        })
        .collect()
}

pub fn loss_screen_csv(rows: &[LossScreenRow]) -> String {
    let mut s = String::from("loss,model,auc,best_epoch\n");
    for r in rows {
        s.push_str(&format!("{},{},{},{}\n", r.loss.id(), r.model_id, r.auc, r.best_epoch));
    }
    s
}

pub fn read_reports(paths: &[std::path::PathBuf]) -> Result<Vec<EvalReport>> {
    paths
        .iter()
        .map(|p| {
            let bytes = std::fs::read(p).map_err(Error::at(p))?;
            serde_json::from_slice(&bytes).map_err(Error::from)
        })
        .collect()
}
