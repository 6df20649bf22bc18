"""
Front-door routers: experiment dispatch and the driver corpus
"""
