//! WebAssembly bindings for the single-page demo in `www/`.

pub mod demo;

use nopelab::TransformerModel;
use wasm_bindgen::prelude::*;

fn js_err(e: nopelab::LabError) -> JsError {
    JsError::new(&e.to_string())
}

/// A model held by the page: freshly initialised or loaded from a
/// checkpoint produced by the CLI.
#[wasm_bindgen]
pub struct Lab {
    model: TransformerModel,
}

#[wasm_bindgen]
impl Lab {
    #[wasm_bindgen(constructor)]
    pub fn new(
        n_layers: usize,
        n_heads: usize,
        d_model: usize,
        use_positional_encoding: bool,
        causal_attention: bool,
        ablated_layers: &str,
        seed: u32,
    ) -> Result<Lab, JsError> {
        let spec = demo::DemoSpec {
            n_layers,
            n_heads,
            d_model,
            use_positional_encoding,
            causal_attention,
            ablated_layers: ablated_layers.to_string(),
            seed: seed.into(),
        };
        Ok(Lab {
            model: demo::build_model(&spec).map_err(js_err)?,
        })
    }

    #[wasm_bindgen(js_name = fromCheckpoint)]
    pub fn from_checkpoint(bytes: &[u8]) -> Result<Lab, JsError> {
        Ok(Lab {
            model: demo::model_from_checkpoint(bytes).map_err(js_err)?,
        })
    }

    pub fn describe(&self) -> String {
        let c = &self.model.config;
        format!(
            "{} | {} layers, {} heads, d_model {}, {} parameters",
            c.label(),
            c.n_layers,
            c.n_heads,
            c.d_model,
            self.model.n_params()
        )
    }

    #[wasm_bindgen(getter, js_name = nLayers)]
    pub fn n_layers(&self) -> usize {
        self.model.config.n_layers
    }

    #[wasm_bindgen(getter, js_name = nHeads)]
    pub fn n_heads(&self) -> usize {
        self.model.config.n_heads
    }

    #[wasm_bindgen(getter)]
    pub fn causal(&self) -> bool {
        self.model.config.causal_attention
    }

    /// Switches the attention mask on the same weights.
    #[wasm_bindgen(js_name = setCausal)]
    pub fn set_causal(&mut self, causal: bool) {
        self.model.config.causal_attention = causal;
    }

    /// Sequence length the page should use to lay out `attention` output.
    #[wasm_bindgen(js_name = promptLength)]
    pub fn prompt_length(&self, prompt: &str) -> Result<usize, JsError> {
        Ok(demo::prompt_ids(&self.model, prompt).map_err(js_err)?.len())
    }

    pub fn attention(&self, prompt: &str, layer: usize, head: usize) -> Result<Vec<f64>, JsError> {
        demo::attention(&self.model, prompt, layer, head).map_err(js_err)
    }

    pub fn permutation(&self, prompt: &str, seed: u32) -> Result<PermutationResult, JsError> {
        let o = demo::permutation(&self.model, prompt, seed.into()).map_err(js_err)?;
        Ok(PermutationResult(o))
    }

    pub fn correlation(
        &self,
        layer: usize,
        n_samples: usize,
        seed: u32,
    ) -> Result<CorrelationResult, JsError> {
        let v = demo::correlation(&self.model, layer, n_samples, seed.into()).map_err(js_err)?;
        Ok(CorrelationResult(v))
    }
}

#[wasm_bindgen]
pub struct PermutationResult(demo::PermutationOutcome);

#[wasm_bindgen]
impl PermutationResult {
    #[wasm_bindgen(getter)]
    pub fn original(&self) -> String {
        self.0.original.clone()
    }
    #[wasm_bindgen(getter)]
    pub fn permuted(&self) -> String {
        self.0.permuted.clone()
    }
    #[wasm_bindgen(getter)]
    pub fn deviation(&self) -> f64 {
        self.0.deviation
    }
    #[wasm_bindgen(getter, js_name = nextOriginal)]
    pub fn next_original(&self) -> String {
        self.0.next_original.clone()
    }
    #[wasm_bindgen(getter, js_name = nextPermuted)]
    pub fn next_permuted(&self) -> String {
        self.0.next_permuted.clone()
    }
    #[wasm_bindgen(getter, js_name = answerOriginal)]
    pub fn answer_original(&self) -> String {
        self.0.answer_original.clone()
    }
    #[wasm_bindgen(getter, js_name = answerPermuted)]
    pub fn answer_permuted(&self) -> String {
        self.0.answer_permuted.clone()
    }
}

#[wasm_bindgen]
pub struct CorrelationResult(demo::CorrelationView);

#[wasm_bindgen]
impl CorrelationResult {
    #[wasm_bindgen(getter)]
    pub fn size(&self) -> usize {
        self.0.size
    }
    #[wasm_bindgen(getter)]
    pub fn pixels(&self) -> Vec<u8> {
        self.0.pixels.clone()
    }
    #[wasm_bindgen(getter, js_name = offBlockRatio)]
    pub fn off_block_ratio(&self) -> f64 {
        self.0.off_block_ratio
    }
}
