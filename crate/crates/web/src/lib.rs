//! Browser demo: three stateless operations over small synthetic corpora.
//!
//! The [`demo`] module is plain Rust and tested natively; the `#[wasm_bindgen]`
//! functions take and return JSON strings.

pub mod demo;

use wasm_bindgen::prelude::*;

fn call<P, V>(params: &str, f: impl FnOnce(&P) -> Result<V, String>) -> Result<String, JsValue>
where
    P: serde::de::DeserializeOwned,
    V: serde::Serialize,
{
    let p: P = serde_json::from_str(if params.trim().is_empty() { "{}" } else { params })
        .map_err(|e| JsValue::from_str(&format!("bad parameters: {e}")))?;
    let view = f(&p).map_err(|e| JsValue::from_str(&e))?;
    serde_json::to_string(&view).map_err(|e| JsValue::from_str(&e.to_string()))
}

/// Trains dictionaries on a 2-D mixture; see [`demo::TrainParams`].
#[wasm_bindgen]
pub fn train_2d(params: &str) -> Result<String, JsValue> {
    call(params, demo::train_2d)
}

/// Recall and nodes visited against L0; see [`demo::CurveParams`].
#[wasm_bindgen]
pub fn recall_curve(params: &str) -> Result<String, JsValue> {
    call(params, demo::recall_curve)
}

/// Global and neighborhood mutual information of trained codes; see [`demo::HeatmapParams`].
#[wasm_bindgen]
pub fn mi_heatmap(params: &str) -> Result<String, JsValue> {
    call(params, demo::mi_heatmap)
}

/// Default parameters of all three operations as JSON.
#[wasm_bindgen]
pub fn default_params() -> String {
    serde_json::json!({
        "train_2d": demo::TrainParams::default(),
        "recall_curve": demo::CurveParams::default(),
        "mi_heatmap": demo::HeatmapParams::default(),
    })
    .to_string()
}
