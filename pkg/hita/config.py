"""Pipeline configuration, profiles and the key-value config file format.

A config file holds one `key = value` per line; `#` starts a comment.
The optional first key `profile` selects the defaults (`desk` or `imagenet`).

```
profile = desk
image_size = 32
downsample_factor = 8   # f
```
"""
import dataclasses
import hashlib
import json
import logging
import math

from .errors import ConfigError, ValidationError

logger = logging.getLogger("hita.config")

DATA_ENV = 'HITA_DATA'
FUSION_MODES = ('select', 'partial', 'full')
RESIZE_FILTERS = ('nearest', 'bilinear', 'bicubic', 'lanczos')
TRUE_VALUES = ('1', 'true', 'yes', 'on')
FALSE_VALUES = ('0', 'false', 'no', 'off')

# Fields that change parameter shapes or the forward computation.
ARCH_FIELDS = ('image_size', 'downsample_factor', 'num_queries', 'selection_k',
               'patch_code_dim', 'holistic_code_dim', 'codebook_size',
               'transformer_depth', 'embed_dim', 'base_channels', 'use_queries',
               'use_mixer', 'use_causal_aligner', 'fusion_mode', 'local_decoder',
               'semantic_provider', 'semantic_dim', 'num_classes', 'ar_layers',
               'ar_width', 'ar_heads')

__all__ = ['PipelineConfig', 'PROFILES', 'load_config', 'build_config',
           'parse_overrides', 'DATA_ENV']


@dataclasses.dataclass(frozen=True)
class PipelineConfig:
    '''Validated, immutable pipeline settings.

    Every construction (including `dataclasses.replace`) re-runs
    validation, so holding a PipelineConfig means holding a valid one.
    '''
    # geometry
    image_size: int = 32
    downsample_factor: int = 8
    num_queries: int = 4
    selection_k: int = 2

    # tokenizer
    patch_code_dim: int = 8
    holistic_code_dim: int = 12
    codebook_size: int = 64
    transformer_depth: int = 2
    embed_dim: int = 64
    base_channels: int = 32
    use_queries: bool = True
    use_mixer: bool = True
    use_causal_aligner: bool = True
    fusion_mode: str = 'select'
    semantic_provider: str = 'frozen-random-conv'
    semantic_command: str = ''
    semantic_dim: int = 64
    perceptual_provider: str = 'frozen-random-conv'
    local_decoder: bool = True
    reseed_dead_codes: bool = True
    reseed_threshold: float = 0.25
    resize_filter: str = 'bilinear'

    # loss weights
    alpha: float = 1.0
    lambda_ae: float = 1.0
    beta: float = 0.25
    lambda_g: float = 0.0
    disc_start_step: int = 0

    # tokenizer optimisation
    learning_rate: float = 2e-3
    grad_clip: float = 1.0
    batch_size: int = 8
    steps: int = 200
    usage_interval: int = 50

    # data
    num_classes: int = 4
    samples_per_class: int = 64

    # autoregressive generator
    ar_layers: int = 2
    ar_width: int = 64
    ar_heads: int = 2
    ar_dropout: float = 0.0
    ar_learning_rate: float = 1e-3
    ar_steps: int = 500
    class_dropout_prob: float = 0.1
    cfg_scale: float = 1.5
    temperature: float = 1.0
    top_k: int = 0

    seed: int = 0

    def __post_init__(self):
        self.validate()

    @property
    def grid_side(self):
        return self.image_size // self.downsample_factor

    @property
    def num_patches(self):
        return self.grid_side ** 2

    @property
    def num_holistic(self):
        return self.num_queries if self.use_queries else 0

    @property
    def seq_len(self):
        return self.num_holistic + self.num_patches

    @property
    def num_stages(self):
        return int(round(math.log2(self.downsample_factor)))

    @property
    def num_heads(self):
        return max(1, self.embed_dim // 64)

    def validate(self):
        positive = ('image_size', 'downsample_factor', 'num_queries',
                    'patch_code_dim', 'holistic_code_dim', 'codebook_size',
                    'transformer_depth', 'embed_dim', 'base_channels',
                    'batch_size', 'usage_interval', 'num_classes',
                    'samples_per_class', 'ar_layers', 'ar_width', 'ar_heads')
        for name in positive:
            if getattr(self, name) <= 0:
                raise ValidationError('{} must be positive'.format(name))

        non_negative = ('selection_k', 'alpha', 'lambda_ae', 'beta', 'lambda_g',
                        'disc_start_step', 'learning_rate', 'grad_clip', 'steps',
                        'semantic_dim', 'reseed_threshold',
                        'ar_dropout', 'ar_learning_rate', 'ar_steps',
                        'temperature', 'top_k')
        for name in non_negative:
            if getattr(self, name) < 0:
                raise ValidationError('{} must be non-negative'.format(name))

        f = self.downsample_factor
        if self.image_size % f:
            raise ValidationError('image_size not divisible by f')
        if f < 2 or f & (f - 1):
            raise ValidationError('downsample_factor must be a power of two')
        if self.selection_k > self.num_patches:
            raise ValidationError('selection_k exceeds patch grid size G')
        if self.selection_k > self.num_holistic:
            raise ValidationError('selection_k exceeds num_queries M')
        if self.fusion_mode not in FUSION_MODES:
            raise ValidationError('fusion_mode must be one of {}'.format(FUSION_MODES))
        if self.fusion_mode != 'select' and not self.use_queries:
            raise ValidationError('fusion_mode {} requires use_queries'.format(self.fusion_mode))
        if self.resize_filter not in RESIZE_FILTERS:
            raise ValidationError('resize_filter must be one of {}'.format(RESIZE_FILTERS))
        if self.embed_dim % self.num_heads:
            raise ValidationError('embed_dim must divide evenly into attention heads')
        if self.ar_width % self.ar_heads:
            raise ValidationError('ar_width not divisible by ar_heads')
        if (self.ar_width // self.ar_heads) % 4:
            raise ValidationError('AR head dimension must be divisible by 4 '
                                  'for 2D rotary embeddings')
        if self.cfg_scale < 1:
            raise ValidationError('cfg_scale must be >= 1')
        if not 0 <= self.class_dropout_prob <= 1:
            raise ValidationError('class_dropout_prob must lie in [0, 1]')

    def to_dict(self):
        return dataclasses.asdict(self)

    def fingerprint(self):
        '''Hash of the canonicalized architecture fields.

        Returns
        -------
        fingerprint : str
            16 hex characters of a sha256 digest.
        '''
        canonical = json.dumps({k: getattr(self, k) for k in ARCH_FIELDS},
                               sort_keys=True)
        return hashlib.sha256(canonical.encode('utf-8')).hexdigest()[:16]

    def fingerprint32(self):
        return int(self.fingerprint()[:8], 16)


PROFILES = dict(
    desk=PipelineConfig(),
    imagenet=PipelineConfig(
        image_size=336, downsample_factor=16, num_queries=128, selection_k=4,
        patch_code_dim=8, holistic_code_dim=12, codebook_size=16384,
        transformer_depth=3, embed_dim=512, base_channels=128,
        semantic_provider='frozen-random-conv', local_decoder=False,
        reseed_dead_codes=False, learning_rate=1e-4,
        batch_size=128, steps=400000, usage_interval=1000, num_classes=1000,
        ar_layers=12, ar_width=768, ar_heads=12, ar_learning_rate=1e-4,
        ar_steps=300000, cfg_scale=2.0))


def _coerce(key, raw, default):
    if isinstance(default, bool):
        text = str(raw).strip().lower()
        if text in TRUE_VALUES:
            return True
        if text in FALSE_VALUES:
            return False
        raise ConfigError("invalid boolean for '{}': {!r}".format(key, raw))

    try:
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
    except (TypeError, ValueError):
        raise ConfigError("invalid value for '{}': {!r}".format(key, raw))

    return str(raw).strip()


def build_config(values):
    '''Build a validated config from raw string values.

    Parameters
    ----------
    values : dict
        Raw key-value pairs; an optional `profile` key selects the defaults.

    Returns
    -------
    config : PipelineConfig

    Raises
    ------
    ConfigError on unknown keys or unparsable values.
    ValidationError when the resulting config violates an invariant.
    '''
    values = dict(values)
    profile = str(values.pop('profile', 'desk')).strip()
    if profile not in PROFILES:
        raise ConfigError("unknown profile '{}'".format(profile))

    base = PROFILES[profile]
    fields = {f.name for f in dataclasses.fields(PipelineConfig)}
    coerced = dict()
    for key, raw in values.items():
        if key not in fields:
            raise ConfigError("unknown configuration key '{}'".format(key))
        coerced[key] = _coerce(key, raw, getattr(base, key))

    return dataclasses.replace(base, **coerced)


def parse_overrides(overrides):
    '''Parse `key=value` strings, as given by repeated `--set` flags.'''
    values = dict()
    for item in overrides or []:
        if '=' not in item:
            raise ConfigError("override '{}' is not of the form key=value".format(item))
        key, value = item.split('=', 1)
        values[key.strip()] = value.strip()
    return values


def read_config_file(path):
    values = dict()
    with open(path, 'r') as fp:
        for lineno, line in enumerate(fp, 1):
            line = line.split('#', 1)[0].strip()
            if not line:
                continue
            if '=' not in line:
                raise ConfigError("{}:{}: expected `key = value`, got '{}'"
                                  .format(path, lineno, line))
            key, value = line.split('=', 1)
            key = key.strip()
            if not key:
                raise ConfigError("{}:{}: missing key".format(path, lineno))
            values[key] = value.strip()
    return values


def load_config(path=None, overrides=None):
    '''Load and validate a pipeline config.

    Parameters
    ----------
    path : str or None
        Key-value config file; None uses the desk profile.

    overrides : list of str
        `key=value` items applied after the file.

    Returns
    -------
    config : PipelineConfig
    '''
    values = read_config_file(path) if path is not None else dict()
    values.update(parse_overrides(overrides))
    config = build_config(values)
    logger.debug("loaded config %s (fingerprint %s)", path, config.fingerprint())
    return config
