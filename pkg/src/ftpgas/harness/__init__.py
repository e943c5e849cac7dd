"""Launcher, fault injection, scenarios and overhead accounting."""
