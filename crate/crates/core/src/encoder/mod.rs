//! Descriptor encoder: model, triplet loss, optimizer and training loop.

pub mod io;
pub mod loss;
pub mod model;
pub mod optim;
pub mod train;

pub use io::{read_checkpoint, write_checkpoint, EmbeddingMatrix};
pub use loss::{triplet_loss, Mining, TripletOutput};
pub use model::{Architecture, EncoderParams, ForwardCache, Mode};
pub use optim::AdamState;
pub use train::{embed, train, TrainConfig, TrainHistory};
