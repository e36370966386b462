//! Sentence ingestion, WordPiece tokenization and BIO label alignment.

mod align;
mod bundle;
mod io;
mod scheme;
mod sentence;
mod split;
mod synth;
pub mod tokenizer;

pub use align::{align_labels, bio_encode, encode_sentence, AlignWarning, ClassSpan, Encoded, TokenizedExample};
pub use bundle::{bundle_digest, Dataset, PrepStats, SplitStats, SPLITS};
pub use io::{read_corpus, write_conll, write_corpus, LoadReport};
pub use scheme::{LabelScheme, IGNORE_INDEX};
pub use sentence::{resolve_entities, AnnotatedSentence, EntityAnnotation, EntityString, Resolution};
pub use split::{split_dataset, SplitSpec, Splits};
pub use synth::{synth_generate, SynthConfig, SynthCorpus};
pub use tokenizer::{tokenize, Token, Vocab};
