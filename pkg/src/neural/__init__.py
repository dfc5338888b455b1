# Neural field stack: autodiff plumbing, fields, renderer, losses
