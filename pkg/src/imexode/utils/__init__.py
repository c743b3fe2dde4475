"""Configuration, logging, error taxonomy and metrics output."""
