"""Exception types shared across the package."""


class MvduError(Exception):
    """Base class for package errors."""


class InsufficientDataError(MvduError):
    """Too few samples to perform a fit or estimate."""


class SingularSystemError(MvduError):
    """A closed-form solve hit a (numerically) singular system."""


class EmptyCloudError(MvduError):
    """An operation requiring points received an empty cloud."""


class DatasetError(MvduError):
    """A dataset file failed validation; message names the file."""


class TrainingDivergenceError(MvduError):
    """A loss component became non-finite during optimization."""
