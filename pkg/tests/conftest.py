import logging

from hypothesis import HealthCheck, settings

# One deterministic profile for the whole suite: no wall-clock deadlines
# (CI boxes vary) and derandomized example generation so reruns are stable.
settings.register_profile(
    "suite",
    deadline=None,
    derandomize=True,
    suppress_health_check=[HealthCheck.too_slow],
)
settings.load_profile("suite")

# keep runner INFO lines out of test output; warnings still show
logging.getLogger("mlcil").setLevel(logging.WARNING)
