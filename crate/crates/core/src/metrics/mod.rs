//! Evaluation measures: BLEU and BLEU-PT, structure similarity over
//! markdown trees, edit-distance accuracies and ANLS.

pub mod bleu;
pub mod edit;
pub mod report;
pub mod strip;
pub mod ted;
pub mod tree;

pub use bleu::{bleu, bleu_pt, Lang};
pub use edit::{anls, char_accuracy, levenshtein, levenshtein_str, word_accuracy, ANLS_TAU};
pub use report::{score, score_files, score_request, MetricReport, ReportMeta, SampleScores, ScoreItem, ScoreTask};
pub use strip::strip_plain;
pub use ted::{steds, tree_edit_distance, tree_similarity};
pub use tree::{parse_structure_tree, Label, StructureTree};
