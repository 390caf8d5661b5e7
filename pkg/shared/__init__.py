"""Shared numeric utilities and schemas for the head-squeezing lab."""
