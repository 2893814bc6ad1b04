"""Structured event-tuple learning from 3D human-object trajectories.

An LSTM encodes fixed-length windows of joint and marker coordinates; three
output heads (independent, joint, tree-CRF) predict the five-slot tuple
(subject, object, locative, verb, preposition).
"""

__version__ = "0.1.0"
