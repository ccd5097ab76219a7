//! Task heads on top of the encoder and their metrics: function similarity
//! by cosine retrieval, per-token type inference, and multi-label
//! classification of function groups.

mod metrics;
mod mlc;
mod similarity;
mod types;

pub use metrics::{lrap, lrl, macro_roc_auc, roc_auc, MultiLabelBatch};
pub use mlc::{attention_pool, attention_pool_backward, predict_mlc, train_mlc, MlcConfig, MlcExample, MlcModel, Pooled};
pub use similarity::{
    build_pools, cosine, cosine_rank, embed, embed_all, finetune_similarity, mrr, recall_at_k, sim_queries,
    triplet_loss, FinetuneConfig, FunctionEmbedding, SimQuery, Triplet, TripletOutput,
};
pub use types::{
    accuracy, dense_type_targets, predict_types, train_type_head, type_inference_head, type_prf, TypeExample,
    TypeHeadOutput, TypeLabelSet, TypeTrainConfig, NO_ACCESS,
};
