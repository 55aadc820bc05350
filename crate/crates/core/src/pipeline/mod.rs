//! Data side of the self-review recipe: templates, self-generated sources
//! and training examples.

pub mod example;
pub mod selfreview;
pub mod template;

pub use example::{
    build_cot_prompts, build_demo_variant, build_sft_dimt_example, build_sft_mt_example, build_ssr_example,
    parse_ssr_response, render_ssr_response, CotMode, DemoPayload, Recipe, SourceProvenance, TrainingExample,
};
pub use selfreview::{generate_selfreview, select_source, SelfReviewRecord, SourceIndex};
pub use template::{DemoTask, PromptTemplate, TemplateRegistry};
