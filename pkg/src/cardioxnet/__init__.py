"""CardioXNet: a from-scratch numpy CRNN for phonocardiogram classification."""
from .errors import (BadMagicError, CardioXNetError, ChecksumError, ClassMismatchError,
                     ClipTooShortError, ConfigError, DataError, EmptyAudioError,
                     ModelFormatError, NumericalError, ShapeError, TruncatedFileError,
                     UnsupportedCodecError, VersionMismatchError, WavFormatError)
from .kernels import available_backends, backend_name, set_backend
from .model import (Model, ModelConfig, build_model, count_flops, count_params, forward,
                    load_model, save_model)
from .signal import (AudioClip, Dataset, decode_wav, encode_wav, load_dataset,
                     normalize_amplitude, preprocess, resample, synth_dataset, synth_pcg,
                     truncate)
from .training import (MetricsReport, TrainConfig, cross_validate, evaluate, split_dataset,
                       stratified_kfold, train)

__version__ = "0.1.0"
