"""Learned, MILP-verified neural controllers for vehicle platoons, with
linear-feedback and distributed-MPC baselines and a 100-vehicle simulator."""

__version__ = "0.1.0"
