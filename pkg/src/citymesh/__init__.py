"""Serverless peer-to-peer replication for a collaborative city-building game."""

__version__ = "0.1.0"
