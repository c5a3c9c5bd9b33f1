//! Volume and checkpoint files, synthetic phantoms and slice sequences.

mod checkpoint;
mod format;
mod io;
mod sequence;
pub mod synthetic;

pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC,
    CHECKPOINT_VERSION,
};
pub use format::{
    decode_header, decode_volume, encode_volume, read_intensity, read_labels, read_volume,
    write_volume, Volume, VolumeHeader, HEADER_LEN, VOLUME_MAGIC,
};
pub use io::{partial_path, write_atomic};
pub use sequence::{extract_sequences, Dataset, SliceSequence};
pub use synthetic::gen_synthetic_case;
