"""Conversation-flow driven data simulation for conversational recommenders."""

__version__ = "0.1.0"
