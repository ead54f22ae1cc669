# vgib package
