use super::{Mode, Model};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tape, Tensor};

/// Grad-CAM map from one item's feature maps and the gradient of the class
/// score with respect to them (both `K×h×w`): channel weights are spatial
/// means of the gradient, and the map is `relu(Σ_k weight_k · feature_k)`.
pub fn cam_from_gradients<T: Scalar>(features: &Tensor<T>, grads: &Tensor<T>) -> Result<Tensor<T>> {
    let &[channels, h, w] = features.shape() else {
        return Err(Error::Contract(format!(
            "Grad-CAM needs K×h×w features, got {:?}",
            features.shape()
        )));
    };
    if grads.shape() != features.shape() {
        return Err(Error::dim(
            "grad_cam",
            "gradient",
            format!("{:?}", features.shape()),
            format!("{:?}", grads.shape()),
        ));
    }
    let plane = h * w;
    let mut cam = vec![T::zero(); plane];
    for k in 0..channels {
        let g = &grads.data()[k * plane..(k + 1) * plane];
        let weight = g.iter().copied().sum::<T>() / T::from_usize(plane).unwrap();
        let f = &features.data()[k * plane..(k + 1) * plane];
        for (c, &v) in cam.iter_mut().zip(f) {
            *c = *c + weight * v;
        }
    }
    for c in &mut cam {
        *c = c.max(T::zero());
    }
    Tensor::new([h, w], cam)
}

/// Grad-CAM heatmaps for a batch, one per item, for the given classes at a
/// convolutional tap. The model is evaluated in eval mode.
pub fn grad_cam_batch<T: Scalar>(
    model: &Model<T>,
    images: &Tensor<T>,
    classes: &[usize],
    tap: &str,
) -> Result<Vec<Tensor<T>>> {
    let batch = images.shape().first().copied().unwrap_or(0);
    if classes.len() != batch {
        return Err(Error::dim("grad_cam", "0 (batch)", batch, classes.len()));
    }
    if let Some(&c) = classes.iter().find(|&&c| c >= model.num_classes()) {
        return Err(Error::Parameter(format!(
            "class index {c} out of range for {} classes",
            model.num_classes()
        )));
    }
    let mut eval = model.clone();
    eval.set_mode(Mode::Eval);
    let tape = Tape::new();
    let bound = eval.bind(&tape, false);
    // The input is marked differentiable so the graph above it tracks gradients.
    let x = tape.leaf(images.clone(), true);
    let acts = eval.forward_tape(&bound, x, &[tap], 0)?;
    let feature = acts.feature(tap)?.retain_grad();
    let fshape = feature.shape();
    if fshape.len() != 4 {
        return Err(Error::Contract(format!(
            "Grad-CAM tap `{tap}` has no spatial dimensions (shape {fshape:?})"
        )));
    }
    let mut select = Tensor::<T>::zeros([batch, model.num_classes()]);
    for (b, &c) in classes.iter().enumerate() {
        select.data_mut()[b * model.num_classes() + c] = T::one();
    }
    let score = acts.logits.mul(tape.constant(select))?.sum();
    tape.backward(score)?;
    let grads = feature
        .grad()
        .unwrap_or_else(|| Tensor::zeros(fshape.clone()));
    let values = feature.value();
    let item: usize = fshape[1..].iter().product();
    (0..batch)
        .map(|b| {
            let slice = |t: &Tensor<T>| {
                Tensor::new(fshape[1..].to_vec(), t.data()[b * item..(b + 1) * item].to_vec())
            };
            cam_from_gradients(&slice(&values)?, &slice(&grads)?)
        })
        .collect()
}

/// Grad-CAM heatmap of one image (`C×H×W` or `1×C×H×W`).
pub fn grad_cam<T: Scalar>(
    model: &Model<T>,
    image: &Tensor<T>,
    class_index: usize,
    tap: &str,
) -> Result<Tensor<T>> {
    let batched = if image.ndim() == 3 {
        let mut shape = vec![1];
        shape.extend_from_slice(image.shape());
        image.clone().reshape(shape)?
    } else {
        image.clone()
    };
    Ok(grad_cam_batch(model, &batched, &[class_index], tap)?.remove(0))
}
