"""
Services package for loewner-lab
"""
