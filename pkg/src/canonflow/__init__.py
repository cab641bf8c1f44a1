"""Lattice simulator for canonical Grassmann maps and the induced flows on
(metric, section space, connection) triples over flat complex tori."""

__version__ = "0.1.0"
