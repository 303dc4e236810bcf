use crate::loss::LabelMap;

/// 4-connected component labelling of a binary mask. Component ids start at
/// 1 and follow scan order of each component's first pixel; 0 marks
/// background. Returns the id map and the size of each component (index
/// `id - 1`).
pub fn connected_components(mask: &[bool], h: usize, w: usize) -> (Vec<u32>, Vec<usize>) {
    assert_eq!(mask.len(), h * w, "mask size");
    let mut ids = vec![0u32; h * w];
    let mut sizes = Vec::new();
    let mut stack = Vec::new();
    for start in 0..h * w {
        if !mask[start] || ids[start] != 0 {
            continue;
        }
        let id = sizes.len() as u32 + 1;
        ids[start] = id;
        stack.push(start);
        let mut size = 0;
        while let Some(i) = stack.pop() {
            size += 1;
            let (y, x) = (i / w, i % w);
            let mut visit = |j: usize| {
                if mask[j] && ids[j] == 0 {
                    ids[j] = id;
                    stack.push(j);
                }
            };
            if y > 0 {
                visit(i - w);
            }
            if y + 1 < h {
                visit(i + w);
            }
            if x > 0 {
                visit(i - 1);
            }
            if x + 1 < w {
                visit(i + 1);
            }
        }
        sizes.push(size);
    }
    (ids, sizes)
}

/// Keeps only the largest 4-connected component of the merged foreground
/// (all classes > 0) of a single `[h, w]` plane; ties go to the component
/// found first in scan order.
pub fn largest_component_plane(labels: &[i32], h: usize, w: usize) -> Vec<i32> {
    let mask: Vec<bool> = labels.iter().map(|&l| l > 0).collect();
    let (ids, sizes) = connected_components(&mask, h, w);
    let Some(keep) = sizes
        .iter()
        .enumerate()
        .fold(None, |best: Option<(usize, usize)>, (i, &s)| match best {
            Some((_, bs)) if bs >= s => best,
            _ => Some((i, s)),
        })
        .map(|(i, _)| i as u32 + 1)
    else {
        return labels.to_vec();
    };
    labels
        .iter()
        .zip(&ids)
        .map(|(&l, &id)| if id == keep { l } else { 0 })
        .collect()
}

/// Applies [`largest_component_plane`] to every image of the batch.
pub fn largest_component_filter(labels: &LabelMap) -> LabelMap {
    let hw = labels.h * labels.w;
    let data = labels
        .data
        .chunks(hw.max(1))
        .flat_map(|p| largest_component_plane(p, labels.h, labels.w))
        .collect();
    LabelMap { data, ..labels.clone() }
}
