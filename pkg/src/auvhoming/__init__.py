"""Joint chaser/target state estimation from inertial, depth, velocity, and
relayed acoustic range-bearing measurements, plus the simulator and
evaluation tooling used to exercise it."""

__version__ = "0.1.0"
