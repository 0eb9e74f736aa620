"""Exception types shared across the package."""


class GanAttackError(Exception):
    """Base class for all errors raised by this package."""


# --- dataset ingestion ---

class MagicMismatch(GanAttackError):
    """IDX file starts with the wrong magic number."""

    def __init__(self, path, offset, expected, got):
        super().__init__(f"{path}: bad magic at offset {offset}: expected {expected}, got {got}")
        self.path, self.offset, self.expected, self.got = path, offset, expected, got


class CountMismatch(GanAttackError):
    """Image and label files disagree on the number of examples."""

    def __init__(self, images_path, labels_path, image_count, label_count):
        super().__init__(
            f"count mismatch: {images_path} has {image_count} images, "
            f"{labels_path} has {label_count} labels"
        )


class TruncatedFile(GanAttackError):
    """File ends before the header-promised payload."""

    def __init__(self, path, offset, needed, available):
        super().__init__(
            f"{path}: truncated at offset {offset}: needed {needed} bytes, had {available}"
        )
        self.path, self.offset = path, offset


class DegenerateSpec(GanAttackError):
    """Mixture specification with coincident component means."""


class EmptyDataset(GanAttackError):
    """Operation requires at least one example."""


# --- models ---

class InconsistentSpec(GanAttackError):
    """Network specification with incompatible dimensions."""


class ShapeMismatch(GanAttackError):
    """Tensor argument has the wrong shape."""


class UnknownClassifier(GanAttackError):
    """Requested target classifier is not in the registry."""


class MissingCheckpoint(GanAttackError):
    """Checkpoint container absent or incomplete."""


# --- losses ---

class BatchMismatch(GanAttackError):
    """Paired batches differ in length."""


class InvalidLabel(GanAttackError):
    """Label outside [0, class_count)."""


# --- training ---

class NonFiniteLoss(GanAttackError):
    """A loss became NaN or infinite; training aborted."""


class FrozenViolation(GanAttackError):
    """A supposedly frozen network's parameters changed."""


# --- diagnostics / pipeline ---

class ZeroGradient(GanAttackError):
    """Gradient vector is identically zero; projection undefined."""


class EmptyInput(GanAttackError):
    """Operation requires a non-empty example list."""


class MissingClassifier(GanAttackError):
    """Transfer evaluation references a classifier that was not supplied."""


class ConfigError(GanAttackError):
    """Bad experiment configuration; message names the offending key."""
