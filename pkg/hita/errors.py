"""Exception types raised across the hita package."""


class HitaError(Exception):
    pass


class ConfigError(HitaError):
    pass


class ValidationError(HitaError):
    pass


class ShapeError(HitaError):
    pass


class DataError(HitaError):
    pass


class StateError(HitaError):
    pass


class DependencyError(HitaError):
    pass


class InputError(HitaError):
    pass


class CheckpointError(ValidationError):
    pass


class TrainingDivergedError(HitaError):
    '''Raised when a training step produces a non-finite loss.

    Attributes
    ----------
    snapshot : dict
        The step index and per-term values at the failing step.
    '''

    def __init__(self, snapshot):
        self.snapshot = dict(snapshot)
        super().__init__('non-finite loss at step {}: {}'.format(
            self.snapshot.get('step'), self.snapshot))
