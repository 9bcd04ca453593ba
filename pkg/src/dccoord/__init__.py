"""Coordination of a power grid with a network of data centers.

Day-ahead bilevel planning of spatio-temporal task shifts and real-time
regression policies for the same shifts.
"""

__version__ = "0.1.0"
