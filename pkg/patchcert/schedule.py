"""
Warm-up schedules for the perturbation scale and the learning rate.
"""

from patchcert.errors import ConfigError


def epsilon_schedule(epoch: float, warmup_epochs: float) -> float:
    """
    Linear ramp of the perturbation scale from 0 to 1 over the warm-up.

    ``epoch`` may be fractional (epoch + batch / batches) for per-batch ramps.
    A zero-length warm-up gives 1 everywhere.

    Raises:
        ConfigError: If epoch or warmup_epochs is negative
    """
    if epoch < 0 or warmup_epochs < 0:
        raise ConfigError(f"epoch and warm-up must be nonnegative, got {epoch}, {warmup_epochs}")
    if warmup_epochs == 0:
        return 1.0
    return min(1.0, epoch / warmup_epochs)


def learning_rate(epoch: int, base_lr: float, warmup_epochs: int, halving_period: int) -> float:
    """Constant during warm-up, then halved every ``halving_period`` epochs."""
    if base_lr <= 0:
        raise ConfigError(f"learning rate must be positive, got {base_lr}")
    if halving_period <= 0 or epoch < warmup_epochs:
        return base_lr
    return base_lr * 0.5 ** ((epoch - warmup_epochs) // halving_period)
