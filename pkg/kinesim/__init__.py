"""kinesim - kinematic action tokens for closed-loop driving simulation"""

__version__ = "1.0.0"
