"""
loewner-lab application package
"""
