from mirank.data.dataset import (
    MONTAGE_27, BadMagicError, DataFormatError, Dataset, TruncatedFileError, VersionMismatchError,
    concat, read_dataset, write_dataset,
)
from mirank.data.protocol import Split, protocol_split
from mirank.data.synth import LEFT_GROUP, RIGHT_GROUP, SynthConfig, synth_generate, synth_subject
