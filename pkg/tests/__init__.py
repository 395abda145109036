"""
Test suite for fracstab
"""
