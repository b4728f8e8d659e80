"""Time-optimal multi-waypoint quadrotor flight toolkit.

Pipeline: sample two-waypoint hover-to-hover tasks, solve each as a
discrete minimum-time problem with complementary progress constraints,
distill the solutions into a small rate/thrust policy network, bridge
intermediate waypoints with minimum-jerk transition polynomials, and
evaluate everything in a closed-loop simulator.
"""

__version__ = "0.1.0"
