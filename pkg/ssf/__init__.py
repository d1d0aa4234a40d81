# SSF package
